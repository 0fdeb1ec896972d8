"""
Entropy-family scores used to pick the profile features that predict a reply, and the
ChiMerge discretizer that makes continuous features countable. Logarithms are base 2.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import chi2
from scipy.stats.contingency import expected_freq

from .errors import DataError, UndefinedScoreError

logger = logging.getLogger(__name__)

DEFAULT_SIGNIFICANCE = 0.05
DEFAULT_MAX_INTERVALS = 16

Partitions = Sequence[Tuple[int, int]]


def _plogp_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def entropy(dist: Sequence[float]) -> float:
    p = np.asarray(dist, dtype=float)
    if p.size == 0:
        raise ValueError('empty distribution')
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError('entropy expects a probability vector (nonnegative, summing to 1)')
    return _plogp_sum(p)


def _joint(joint) -> np.ndarray:
    """Counts or probabilities, normalized; rows are X, columns are Y."""
    p = np.asarray(joint, dtype=float)
    if p.ndim != 2 or p.size == 0:
        raise ValueError('expected a non-empty 2-D joint table')
    if (p < 0).any():
        raise ValueError('joint table has negative entries')
    total = p.sum()
    if total <= 0:
        raise ValueError('joint table has no mass')
    return p / total


def conditional_entropy(joint) -> float:
    """H(X|Y) = sum_x sum_y P(x,y) log2(P(y) / P(x,y))."""
    p = _joint(joint)
    py = np.broadcast_to(p.sum(axis=0, keepdims=True), p.shape)
    mask = p > 0
    return float((p[mask] * np.log2(py[mask] / p[mask])).sum())


def mutual_information(joint) -> float:
    p = _joint(joint)
    outer = p.sum(axis=1, keepdims=True) * p.sum(axis=0, keepdims=True)
    mask = p > 0
    return max(0.0, float((p[mask] * np.log2(p[mask] / outer[mask])).sum()))


def marginal_entropy(joint, axis: int = 0) -> float:
    """H(X) for axis=0 (rows), H(Y) for axis=1."""
    p = _joint(joint)
    return _plogp_sum(p.sum(axis=1 - axis))


def info(n_y: int, n_n: int) -> float:
    """Bits needed to predict a reply from n_y replied and n_n unreplied messages."""
    total = n_y + n_n
    if total <= 0:
        raise ValueError('info needs at least one message')
    return _plogp_sum(np.array([n_y, n_n], dtype=float) / total)


def _partition_array(partitions: Partitions) -> np.ndarray:
    arr = np.asarray(partitions, dtype=float).reshape(-1, 2)
    if (arr < 0).any():
        raise ValueError('partition counts should be nonnegative')
    if arr.sum() <= 0:
        raise ValueError('all partitions are empty')
    return arr


def info_given_feature(partitions: Partitions) -> float:
    arr = _partition_array(partitions)
    sizes = arr.sum(axis=1)
    total = sizes.sum()
    return float(sum(
        (size / total) * info(ny, nn) for (ny, nn), size in zip(arr, sizes) if size > 0
    ))


def split_info(partitions: Partitions) -> float:
    arr = _partition_array(partitions)
    sizes = arr.sum(axis=1)
    return _plogp_sum(sizes / sizes.sum())


def information_gain(partitions: Partitions) -> float:
    arr = _partition_array(partitions)
    ny, nn = arr.sum(axis=0)
    return max(0.0, info(ny, nn) - info_given_feature(arr))


def information_gain_ratio(partitions: Partitions) -> float:
    si = split_info(partitions)
    if si <= 0:
        raise UndefinedScoreError('gain ratio undefined: feature has a single non-empty value')
    return information_gain(partitions) / si


def chi2_threshold(significance: float = DEFAULT_SIGNIFICANCE, df: int = 1) -> float:
    """Chi-square value a merge must exceed to count as significant at the given level."""
    if not 0 < significance < 1:
        raise ValueError('significance should lie in (0, 1)')
    return float(chi2.ppf(1 - significance, df))


DEFAULT_CHI2_THRESHOLD = chi2_threshold()


def adjacent_chi2(a: np.ndarray, b: np.ndarray) -> float:
    """Chi-square of a 2x2 table of class counts; cells with zero expectation add nothing."""
    table = np.vstack([a, b]).astype(float)
    if table.sum() == 0:
        return 0.0
    expected = expected_freq(table)
    mask = expected > 0
    return float((((table - expected) ** 2)[mask] / expected[mask]).sum())


def chimerge(
        values: Sequence[float],
        labels: Sequence[bool],
        significance_threshold: float = DEFAULT_CHI2_THRESHOLD,
        max_intervals: int = DEFAULT_MAX_INTERVALS,
) -> List[float]:
    """
    Bottom-up merging of adjacent intervals. Starts from one interval per distinct value and
    merges the leftmost pair with the smallest chi-square until every adjacent pair exceeds
    the threshold and at most max_intervals remain. Returns the boundaries: the lowest value
    of every interval, then the largest observed value.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if values.size == 0:
        raise ValueError('chimerge needs at least one sample')
    if values.shape != labels.shape:
        raise ValueError('values and labels should have the same length')
    if max_intervals < 1:
        raise ValueError('max_intervals should be at least 1')

    distinct, inverse = np.unique(values, return_inverse=True)
    counts = np.zeros((len(distinct), 2))
    np.add.at(counts, (inverse, labels.astype(int)), 1)
    lows = list(distinct)
    intervals = [row for row in counts]
    chi = [adjacent_chi2(intervals[i], intervals[i + 1]) for i in range(len(intervals) - 1)]

    while len(intervals) > 1:
        i = int(np.argmin(chi))  # leftmost minimum
        if chi[i] > significance_threshold and len(intervals) <= max_intervals:
            break
        intervals[i] = intervals[i] + intervals[i + 1]
        del intervals[i + 1]
        del lows[i + 1]
        del chi[i]
        if i > 0:
            chi[i - 1] = adjacent_chi2(intervals[i - 1], intervals[i])
        if i < len(intervals) - 1:
            chi[i] = adjacent_chi2(intervals[i], intervals[i + 1])
    return [float(v) for v in lows] + [float(distinct[-1])]


def extend_to_range(boundaries: Sequence[float], lo: float, hi: float) -> List[float]:
    """Stretches chimerge boundaries so the intervals cover the declared range [lo, hi]."""
    inner = [b for b in boundaries[1:-1] if lo < b < hi]
    return [float(lo)] + inner + [float(hi)]


@dataclass
class FeatureScore:
    igr: Optional[float]
    ig: float
    split_info: float
    eliminated_by: Optional[Dict[str, Union[str, float, None]]] = None

    def to_dict(self):
        return {'igr': self.igr, 'ig': self.ig, 'split_info': self.split_info, 'eliminated_by': self.eliminated_by}


@dataclass
class SelectionConfig:
    score_floor_policy: Union[str, float, None] = 'mean'
    conditional_entropy_threshold: float = 0.05
    mutual_information_ratio: float = 0.9


@dataclass
class FeatureScoreReport:
    scores: Dict[str, FeatureScore]
    ranking: List[str]
    pairwise: List[Dict[str, Union[str, float]]] = field(default_factory=list)
    mean_igr: Optional[float] = None

    @property
    def survivors(self) -> List[str]:
        return [f for f in self.ranking if self.scores[f].eliminated_by is None]

    def to_dict(self):
        return {
            'features': {name: score.to_dict() for name, score in self.scores.items()},
            'ranking': self.ranking,
            'survivors': self.survivors,
            'pairwise': self.pairwise,
            'mean_igr': self.mean_igr,
        }


def joint_counts(dataset: pd.DataFrame, feature: str, label: str = 'replied') -> pd.DataFrame:
    """Feature value x reply-class counts (columns: replied, not replied)."""
    table = pd.crosstab(dataset[feature], dataset[label].astype(bool))
    return table.reindex(columns=[True, False], fill_value=0)


def select_features(
        dataset: pd.DataFrame,
        config: Optional[SelectionConfig] = None,
        label: str = 'replied',
) -> FeatureScoreReport:
    """
    Ranks the discretized feature columns of dataset by gain ratio against the reply label,
    drops those at or below the floor, then drops features whose information is contained
    in a higher-ranked survivor.
    """
    config = config or SelectionConfig()
    features = [c for c in dataset.columns if c != label]
    if dataset.empty or not features:
        raise DataError('feature selection needs a non-empty dataset with at least one feature')

    scores: Dict[str, FeatureScore] = {}
    for name in features:
        partitions = joint_counts(dataset, name, label).to_numpy()
        ig = information_gain(partitions)
        si = split_info(partitions)
        try:
            igr = information_gain_ratio(partitions)
        except UndefinedScoreError:
            logger.warning('gain ratio of %s undefined (single value)', name)
            igr = None
        scores[name] = FeatureScore(igr=igr, ig=ig, split_info=si)

    for name, score in scores.items():
        if score.igr is None:
            score.eliminated_by = {'rule': 'undefined_igr', 'partner': None, 'score': None}
    defined = [name for name in features if scores[name].igr is not None]
    ranking = sorted(defined, key=lambda f: -scores[f].igr) + [f for f in features if f not in defined]

    mean_igr = float(np.mean([scores[f].igr for f in defined])) if defined else None
    policy = config.score_floor_policy
    igrs = np.array([scores[f].igr for f in defined])
    if policy == 'mean' and (len(igrs) < 2 or np.ptp(igrs) <= 1e-12):
        # all tied: nothing lies above the mean, so only the redundancy rules decide
        logger.info('gain ratios of the %d scored feature(s) tie; score floor skipped', len(igrs))
    elif policy is not None and defined:
        floor = mean_igr if policy == 'mean' else float(policy)
        for name in defined:
            if not scores[name].igr > floor:
                scores[name].eliminated_by = {'rule': 'score_floor', 'partner': None, 'score': scores[name].igr}

    pairwise = []
    kept: List[str] = []
    for b in ranking:
        if scores[b].eliminated_by is not None:
            continue
        for a in kept:
            joint = pd.crosstab(dataset[b], dataset[a]).to_numpy()
            h_b_given_a = conditional_entropy(joint)
            mi = mutual_information(joint)
            h_b = marginal_entropy(joint, axis=0)
            h_a = marginal_entropy(joint, axis=1)
            pairwise.append({'a': a, 'b': b, 'h_b_given_a': h_b_given_a, 'mi': mi})
            if h_b_given_a < config.conditional_entropy_threshold:
                scores[b].eliminated_by = {'rule': 'conditional_entropy', 'partner': a, 'score': h_b_given_a}
                break
            if mi > config.mutual_information_ratio * min(h_a, h_b):
                scores[b].eliminated_by = {'rule': 'mutual_information', 'partner': a, 'score': mi}
                break
        if scores[b].eliminated_by is None:
            kept.append(b)

    report = FeatureScoreReport(scores=scores, ranking=ranking, pairwise=pairwise, mean_igr=mean_igr)
    if not report.survivors:
        raise DataError('no feature survived selection; review the score floor and redundancy thresholds')
    for name, score in scores.items():
        if score.eliminated_by is not None:
            logger.info('dropped feature %s (%s)', name, score.eliminated_by['rule'])
    return report
