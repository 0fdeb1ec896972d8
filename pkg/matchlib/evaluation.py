"""
How well the pipeline works: recovery of the simulated user types, and the fold-wise
ranking experiment that compares reply rates of messages kept by different policies.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .domain import GENDERS, DiscretizationPlan, MessageLog, PairEncoder, UserSet
from .errors import DataError
from .lda import Hyperparams, Schedule, TrainedModel, train
from .simulator import TruePreferences
from .utils import substream, write_json

logger = logging.getLogger(__name__)

POLICIES = ('random', 'suitor', 'two_sided')
ENUMERATION_LIMIT = math.factorial(8)


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """D(p || q) in bits; terms with p_v = 0 contribute nothing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DataError('kl_divergence needs vectors of the same length')
    support = p > 0
    if (q[support] <= 0).any():
        raise DataError('kl_divergence undefined: q is zero where p is positive')
    return max(0.0, float((p[support] * np.log2(p[support] / q[support])).sum()))


@dataclass
class TypeMatching:
    """learned_to_true[j] = i pairs learned type j with true type i; cost[i, j] = D(p_i || phi_j)."""
    learned_to_true: Dict[int, int]
    cost: np.ndarray

    @property
    def true_to_learned(self) -> Dict[int, int]:
        return {i: j for j, i in self.learned_to_true.items()}

    @property
    def total_cost(self) -> float:
        return float(sum(self.cost[i, j] for j, i in self.learned_to_true.items()))


def match_types(true_prefs: np.ndarray, learned_phi: np.ndarray) -> TypeMatching:
    """Minimum total K-L assignment of true types to distinct learned types."""
    true_prefs = np.atleast_2d(np.asarray(true_prefs, dtype=float))
    learned_phi = np.atleast_2d(np.asarray(learned_phi, dtype=float))
    if true_prefs.shape[0] == 0 or learned_phi.shape[0] == 0:
        raise DataError('match_types needs at least one true and one learned type')
    if true_prefs.shape[1] != learned_phi.shape[1]:
        raise DataError('true and learned preferences cover different feature spaces')
    n_true, n_learned = true_prefs.shape[0], learned_phi.shape[0]
    cost = np.array([[kl_divergence(p, phi) for phi in learned_phi] for p in true_prefs])

    small, large = min(n_true, n_learned), max(n_true, n_learned)
    if math.perm(large, small) <= ENUMERATION_LIMIT:
        best, best_cost = None, np.inf
        for injection in itertools.permutations(range(large), small):
            if n_true <= n_learned:
                pairs = list(zip(range(n_true), injection))
            else:
                pairs = list(zip(injection, range(n_learned)))
            total = sum(cost[i, j] for i, j in pairs)
            if total < best_cost:
                best, best_cost = pairs, total
    else:
        rows, cols = linear_sum_assignment(cost)
        best = list(zip(rows.tolist(), cols.tolist()))
    return TypeMatching(learned_to_true={int(j): int(i) for i, j in best}, cost=cost)


@dataclass
class TypeRecovery:
    precision: Optional[float]
    recall: Optional[float]
    kl: Optional[float]
    n_true: int
    n_predicted: int

    def to_dict(self):
        return {'precision': self.precision, 'recall': self.recall, 'kl': self.kl,
                'n_true': self.n_true, 'n_predicted': self.n_predicted}


def type_recovery_metrics(truth: Mapping[str, int], learned: Mapping[str, int],
                          matching: TypeMatching) -> Dict[int, TypeRecovery]:
    """Per true type precision and recall after relabelling learned types through the matching."""
    if set(truth) != set(learned):
        raise DataError('true and learned labels should cover the same users')
    true_types = sorted(set(range(matching.cost.shape[0])) | set(truth.values()))
    relabelled = {u: matching.learned_to_true.get(t, -1) for u, t in learned.items()}
    true_to_learned = matching.true_to_learned
    metrics = {}
    for t in true_types:
        n_true = sum(1 for v in truth.values() if v == t)
        n_predicted = sum(1 for v in relabelled.values() if v == t)
        correct = sum(1 for u, v in truth.items() if v == t and relabelled[u] == t)
        j = true_to_learned.get(t)
        metrics[t] = TypeRecovery(
            precision=correct / n_predicted if n_predicted else None,
            recall=correct / n_true if n_true else None,
            kl=float(matching.cost[t, j]) if j is not None and t < matching.cost.shape[0] else None,
            n_true=n_true,
            n_predicted=n_predicted,
        )
    return metrics


def type_concentration(labels: Mapping[str, int], k: int = 4) -> float:
    """Share of users whose type is among the k most populated types."""
    if not labels:
        raise DataError('type_concentration needs at least one labelled user')
    counts = pd.Series(list(labels.values())).value_counts()
    top = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:k]
    return float(sum(n for _, n in top) / len(labels))


def partition_folds(log: MessageLog, k: int) -> List[List[str]]:
    """
    k user sets with no message between them: connected components of the message
    graph, packed largest first into the currently smallest fold.
    """
    if k < 1:
        raise DataError('fold count should be at least 1')
    user_ids = sorted({e.sender_id for e in log} | {e.receiver_id for e in log})
    folds: List[List[str]] = [[] for _ in range(k)]
    if not user_ids:
        return folds
    index = {u: i for i, u in enumerate(user_ids)}
    rows = [index[e.sender_id] for e in log]
    cols = [index[e.receiver_id] for e in log]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(user_ids), len(user_ids)))
    n_components, component = connected_components(graph, directed=False)
    members: List[List[str]] = [[] for _ in range(n_components)]
    for u, c in zip(user_ids, component):
        members[c].append(u)
    members.sort(key=lambda m: (-len(m), m[0]))

    if len(members[0]) > len(user_ids) / k:
        logger.warning('largest message component holds %d of %d users; folds will be unbalanced',
                       len(members[0]), len(user_ids))
    for m in members:
        lightest = min(range(k), key=lambda i: (len(folds[i]), i))
        folds[lightest].extend(m)
    folds = [sorted(f) for f in folds]
    logger.info('fold sizes: %s', [len(f) for f in folds])
    return folds


@dataclass
class RankingResult:
    policy: str
    kept: Dict[str, int]
    replied: Dict[str, int]

    def success_rate(self, gender: Optional[str] = None) -> Optional[float]:
        genders = [gender] if gender else list(self.kept)
        kept = sum(self.kept.get(g, 0) for g in genders)
        replied = sum(self.replied.get(g, 0) for g in genders)
        return replied / kept if kept else None


def ranking_experiment(model: TrainedModel, log: MessageLog, users: UserSet, fold: Sequence[str],
                       policy: str, seed: Optional[int] = None) -> RankingResult:
    """
    For every fold suitor who wrote to two or more distinct receivers: rank the suitor's
    first contacts by the policy score, keep the top half (rounded up) and count replies.
    Ties keep timestamp order.
    """
    if policy not in POLICIES:
        raise DataError(f'policy should be one of {POLICIES}, got {policy!r}')
    members = set(fold)
    by_suitor: Dict[str, list] = {}
    for e in log.initiations():
        if e.sender_id in members and e.receiver_id in members:
            by_suitor.setdefault(e.sender_id, []).append(e)
    eligible = sorted(s for s, msgs in by_suitor.items() if len({m.receiver_id for m in msgs}) >= 2)
    if not eligible:
        raise DataError('no suitor in the fold wrote to two or more distinct receivers')

    encoder = PairEncoder(users.subset(members), model.plan, model.space) if policy != 'random' else None
    kept = {g: 0 for g in GENDERS}
    replied = {g: 0 for g in GENDERS}
    for suitor in eligible:
        msgs = sorted(by_suitor[suitor], key=lambda m: m.ts)
        if policy == 'random':
            scores = substream(seed, 'ranking', suitor).random(len(msgs))
        else:
            s = encoder.row[suitor]
            receivers = encoder.rows_of(m.receiver_id for m in msgs)
            phi = model.side(encoder.gender[s]).phi
            scores = model.type_weights(encoder.profiles[s]) @ phi[:, encoder.ids(s, receivers)]
            if policy == 'two_sided':
                back = np.array([
                    model.type_weights(encoder.profiles[r]) @ model.side(encoder.gender[r]).phi[:, encoder.ids(r, [s])[0]]
                    for r in receivers
                ])
                scores = scores * back
        top = np.argsort(-np.asarray(scores), kind='stable')[:max(1, math.ceil(len(msgs) / 2))]
        gender = users[suitor].gender
        kept[gender] += len(top)
        replied[gender] += sum(1 for i in top if msgs[i].replied)
    return RankingResult(policy, kept, replied)


def relative_gain(rate_a: float, rate_b: float) -> float:
    """Percentage by which rate_a exceeds rate_b."""
    if rate_b is None or rate_b <= 0:
        raise DataError('relative gain needs a positive baseline rate')
    return 100.0 * (rate_a - rate_b) / rate_b


@dataclass
class ExperimentReport:
    folds: List[List[str]]
    rates: List[Dict] = field(default_factory=list)
    type_recovery: Dict[str, Dict] = field(default_factory=dict)
    config: Optional[dict] = None

    def to_frame(self) -> pd.DataFrame:
        """One row per fold x gender x policy."""
        columns = ['fold', 'gender', 'policy', 'success_rate', 'kept', 'replied']
        return pd.DataFrame(self.rates, columns=columns).astype({'success_rate': float})

    def gains(self, policy: str = 'two_sided', baseline: str = 'suitor') -> pd.DataFrame:
        frame = self.to_frame().dropna(subset=['success_rate'])
        if frame.empty:
            return pd.DataFrame(columns=['fold', 'gender', 'relative_gain'])
        wide = frame.pivot_table(index=['fold', 'gender'], columns='policy', values='success_rate')
        if policy not in wide or baseline not in wide:
            return pd.DataFrame(columns=['fold', 'gender', 'relative_gain'])
        wide = wide[wide[baseline] > 0].dropna(subset=[policy, baseline])
        gains = 100.0 * (wide[policy] - wide[baseline]) / wide[baseline]
        return gains.rename('relative_gain').reset_index()

    def summary(self) -> Dict[str, Dict]:
        frame = self.to_frame().dropna(subset=['success_rate'])
        out: Dict[str, Dict] = {}
        for (gender, policy), rates in frame.groupby(['gender', 'policy'])['success_rate']:
            out.setdefault(gender, {})[policy] = {
                'mean': _nan_to_none(rates.mean()),
                'std': _nan_to_none(rates.std()),
                'median': _nan_to_none(rates.median()),
                'folds': int(rates.size),
            }
        for baseline in ('suitor', 'random'):
            gains = self.gains('two_sided', baseline)
            for gender, g in gains.groupby('gender')['relative_gain']:
                out.setdefault(gender, {})[f'gain_two_sided_vs_{baseline}'] = {
                    'mean': _nan_to_none(g.mean()),
                    'median': _nan_to_none(g.median()),
                    'per_fold': [float(v) for v in g],
                }
        return out

    def to_dict(self):
        d = {
            'folds': self.folds,
            'fold_sizes': [len(f) for f in self.folds],
            'rates': self.rates,
            'summary': self.summary(),
            'type_recovery': self.type_recovery,
        }
        if self.config is not None:
            d['config'] = self.config
        return d

    def save(self, path: str):
        write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, d) -> 'ExperimentReport':
        return cls(folds=d['folds'], rates=d['rates'], type_recovery=d.get('type_recovery', {}),
                   config=d.get('config'))


def _nan_to_none(value) -> Optional[float]:
    value = float(value)
    return None if math.isnan(value) else value


def evaluate_type_recovery(model: TrainedModel, prefs: TruePreferences, truth: Mapping[str, int],
                           top_k: Optional[int] = None) -> Dict[str, Dict]:
    """Matching, per-type metrics and type concentration for every trained side."""
    out = {}
    for gender, side in sorted(model.sides.items()):
        learned = side.hard_labels
        missing = [u for u in learned if u not in truth]
        if missing:
            raise DataError(f'no true type for trained user {missing[0]}')
        matching = match_types(prefs.p[gender], side.phi)
        metrics = type_recovery_metrics({u: truth[u] for u in learned}, learned, matching)
        k = top_k or prefs.types_per_gender
        out[gender] = {
            'matching': {str(j): i for j, i in sorted(matching.learned_to_true.items())},
            'types': {str(t): m.to_dict() for t, m in metrics.items()},
            'type_concentration': type_concentration(learned, k),
            'total_kl': matching.total_cost,
        }
        logger.info('%s: %.1f%% of users in the %d largest learned types', gender,
                    100 * out[gender]['type_concentration'], k)
    return out


def run_experiment(users: UserSet, log: MessageLog, plan: DiscretizationPlan, hp: Hyperparams,
                   schedule: Schedule, k: int = 10, policies: Sequence[str] = POLICIES) -> ExperimentReport:
    """Trains one model per fold on the remaining users and ranks the fold's messages under each policy."""
    for policy in policies:
        if policy not in POLICIES:
            raise DataError(f'policy should be one of {POLICIES}, got {policy!r}')
    folds = partition_folds(log, k)
    report = ExperimentReport(folds=folds)
    for i, fold in enumerate(folds):
        if not fold:
            logger.warning('fold %d is empty', i)
            continue
        members = set(fold)
        rest = [u for u in users.ids if u not in members]
        fold_schedule = Schedule(schedule.burn_in, schedule.n_samples, schedule.thin,
                                 int(substream(schedule.seed, 'fold', i).integers(2 ** 63 - 1)))
        logger.info('fold %d: training on %d users, testing on %d', i, len(rest), len(fold))
        try:
            model = train(log.restricted_to(rest), users.subset(rest), plan, hp, fold_schedule)
        except DataError as e:
            logger.warning('fold %d skipped: %s', i, e)
            continue
        for policy in policies:
            try:
                result = ranking_experiment(model, log, users, fold, policy, seed=schedule.seed)
            except DataError as e:
                logger.warning('fold %d skipped for %s: %s', i, policy, e)
                continue
            for gender in GENDERS:
                report.rates.append({
                    'fold': i,
                    'gender': gender,
                    'policy': policy,
                    'success_rate': result.success_rate(gender),
                    'kept': result.kept[gender],
                    'replied': result.replied[gender],
                })
    return report
