import itertools

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chi2_contingency

from matchlib.errors import DataError, UndefinedScoreError
from matchlib.infotheory import (
    SelectionConfig,
    adjacent_chi2,
    chi2_threshold,
    chimerge,
    conditional_entropy,
    entropy,
    extend_to_range,
    info,
    info_given_feature,
    information_gain,
    information_gain_ratio,
    marginal_entropy,
    mutual_information,
    select_features,
    split_info,
)

# replied / not replied counts of the three values of a feature over 14 messages
WORKED_PARTITIONS = [(2, 3), (4, 0), (3, 2)]


def test_entropy_of_a_biased_coin():
    assert entropy([0.25, 0.75]) == pytest.approx(0.811278, abs=1e-6)
    assert entropy([1.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])


def test_info_of_nine_to_five():
    assert info(9, 5) == pytest.approx(0.940286, abs=1e-6)


def test_worked_partition_example():
    assert info_given_feature(WORKED_PARTITIONS) == pytest.approx(0.693536, abs=1e-6)
    assert information_gain(WORKED_PARTITIONS) == pytest.approx(0.246750, abs=1e-6)
    assert split_info(WORKED_PARTITIONS) == pytest.approx(1.577406, abs=1e-6)
    assert information_gain_ratio(WORKED_PARTITIONS) == pytest.approx(0.156428, abs=1e-6)


def test_gain_ratio_undefined_for_single_valued_feature():
    with pytest.raises(UndefinedScoreError):
        information_gain_ratio([(5, 3), (0, 0)])


def test_mutual_information_identity_on_random_joints():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        joint = rng.dirichlet(np.ones(12)).reshape(3, 4)
        h_x = marginal_entropy(joint, axis=0)
        assert mutual_information(joint) == pytest.approx(h_x - conditional_entropy(joint), abs=1e-12)


def test_conditional_entropy_extremes():
    identical = np.diag([0.2, 0.3, 0.5])
    assert conditional_entropy(identical) == pytest.approx(0.0, abs=1e-15)
    independent = np.outer([0.5, 0.5], [0.25, 0.75])
    assert conditional_entropy(independent) == pytest.approx(1.0)
    assert mutual_information(independent) == pytest.approx(0.0, abs=1e-12)


def test_chimerge_splits_at_the_label_change():
    values = np.arange(1, 11)
    assert chimerge(values, values > 5) == [1.0, 6.0, 10.0]


def test_chimerge_merges_uninformative_values():
    values = [3, 1, 2, 5, 4, 4]
    assert chimerge(values, [True] * len(values)) == [1.0, 5.0]


def test_chimerge_respects_max_intervals():
    values = np.arange(40)
    labels = (values // 10) % 2 == 0
    assert len(chimerge(values, labels, max_intervals=4)) - 1 <= 4
    assert len(chimerge(values, labels, max_intervals=2)) - 1 <= 2


def test_extend_to_range_covers_declared_domain():
    assert extend_to_range([1, 6, 10], 0, 20) == [0.0, 6.0, 20.0]
    assert extend_to_range([-3, 0, 5], -10, 10) == [-10.0, 0.0, 10.0]


def majority_dataset(with_copy=False):
    """All 2^8 bit patterns; replies follow the majority of the first five bits."""
    rows = []
    for bits in itertools.product((0, 1), repeat=8):
        row = {f'f{i}': bits[i] for i in range(5)}
        row.update({f'noise{i}': bits[5 + i] for i in range(3)})
        if with_copy:
            row['f0_copy'] = bits[0]
        row['replied'] = sum(bits[:5]) >= 3
        rows.append(row)
    return pd.DataFrame(rows)


def test_select_features_keeps_the_five_informative_features():
    report = select_features(majority_dataset())
    assert report.survivors == [f'f{i}' for i in range(5)]
    for i in range(3):
        assert report.scores[f'noise{i}'].eliminated_by['rule'] == 'score_floor'
        assert report.scores[f'noise{i}'].igr == 0.0


def test_select_features_drops_a_duplicate():
    report = select_features(majority_dataset(with_copy=True))
    assert report.survivors == [f'f{i}' for i in range(5)]
    eliminated = report.scores['f0_copy'].eliminated_by
    assert eliminated['rule'] == 'conditional_entropy'
    assert eliminated['partner'] == 'f0'


def test_select_features_without_a_floor_uses_redundancy_only():
    report = select_features(majority_dataset(), SelectionConfig(score_floor_policy=None))
    assert len(report.survivors) == 8


def test_select_features_marks_constant_features():
    frame = majority_dataset()
    frame['constant'] = 1
    report = select_features(frame)
    assert report.scores['constant'].eliminated_by['rule'] == 'undefined_igr'
    assert 'constant' not in report.survivors
    assert report.to_dict()['survivors'] == report.survivors


def test_select_features_rejects_empty_dataset():
    with pytest.raises(DataError):
        select_features(pd.DataFrame(columns=['age', 'replied']))


def test_select_features_fails_when_nothing_survives():
    frame = pd.DataFrame({'a': [1, 1, 1], 'replied': [True, False, True]})
    with pytest.raises(DataError, match='no feature survived'):
        select_features(frame)


def test_select_features_keeps_one_of_an_exact_copy():
    x = [1, 2, 3, 1, 2, 3, 1, 2]
    y = [True, False, True, True, False, False, True, False]
    report = select_features(pd.DataFrame({'a': x, 'a_copy': x, 'replied': y}))
    assert report.survivors == ['a']
    eliminated = report.scores['a_copy'].eliminated_by
    assert eliminated['rule'] == 'conditional_entropy'
    assert eliminated['partner'] == 'a'


def test_select_features_keeps_a_lone_feature():
    frame = pd.DataFrame({'age': [0, 1, 0, 1], 'replied': [True, False, True, True]})
    assert select_features(frame).survivors == ['age']


def test_chi2_threshold_matches_the_usual_table():
    assert chi2_threshold() == pytest.approx(3.841459, abs=1e-6)
    assert chi2_threshold(0.01) == pytest.approx(6.634897, abs=1e-6)
    with pytest.raises(ValueError):
        chi2_threshold(0.0)


def test_adjacent_chi2_agrees_with_scipy():
    a, b = np.array([8, 2]), np.array([3, 7])
    expected = chi2_contingency(np.vstack([a, b]), correction=False)[0]
    assert adjacent_chi2(a, b) == pytest.approx(expected, rel=1e-12)
    # an empty class column contributes nothing
    assert adjacent_chi2(np.array([4, 0]), np.array([6, 0])) == 0.0
