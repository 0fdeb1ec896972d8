import json

import numpy as np
import pytest

from matchlib.domain import (
    DiscretizationPlan,
    FeatureSpace,
    FeatureTuple,
    MessageEvent,
    MessageLog,
    PairEncoder,
    UserSet,
    initiation_frame,
    load_messages,
    load_users,
    pair_feature_tuple,
    profile_tuple,
)
from matchlib.errors import DataError


def write_lines(path, objs):
    with open(path, 'w') as f:
        for obj in objs:
            f.write(obj if isinstance(obj, str) else json.dumps(obj))
            f.write('\n')
    return str(path)


def user_obj(user_id, gender='F', **features):
    base = {'age': 30, 'weight': 60, 'height': 165, 'income_level': 4, 'child_info': 'none'}
    base.update(features)
    return {'user_id': user_id, 'gender': gender, 'features': base}


def test_load_users_empty_file(tmp_path):
    assert len(load_users(write_lines(tmp_path / 'users.jsonl', []))) == 0


def test_users_survive_save_and_load(tmp_path):
    path = write_lines(tmp_path / 'users.jsonl', [user_obj('a'), user_obj('b', 'M', blood_type='O')])
    users = load_users(path)
    assert len(users) == 2
    users.save(str(tmp_path / 'again.jsonl'))
    assert load_users(str(tmp_path / 'again.jsonl')) == users
    assert users['b']['blood_type'] == 'O'


def test_duplicate_user_id_is_named(tmp_path):
    path = write_lines(tmp_path / 'users.jsonl', [user_obj('dup'), user_obj('dup', 'M')])
    with pytest.raises(DataError, match='dup'):
        load_users(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = write_lines(tmp_path / 'users.jsonl', [user_obj('a'), '{"user_id": '])
    with pytest.raises(DataError, match=':2:'):
        load_users(path)


@pytest.mark.parametrize('features, message', [
    ({'age': 12}, 'age'),
    ({'child_info': 'many'}, 'child_info'),
    ({'weight': None}, 'weight'),
    ({'income_level': 3.5}, 'income_level'),
])
def test_invalid_profiles_are_rejected(tmp_path, features, message):
    path = write_lines(tmp_path / 'users.jsonl', [user_obj('a', **features)])
    with pytest.raises(DataError, match=message):
        load_users(path)


def test_load_messages_validates_sides_and_users(tmp_path, toy_users):
    good = {'sender_id': 'F1', 'receiver_id': 'M1', 'ts': 1, 'replied': True, 'kind': 'init'}
    log = load_messages(write_lines(tmp_path / 'm.jsonl', [good]), toy_users)
    assert log.contacts('F1') == ('M1',)

    same_side = dict(good, receiver_id='F2')
    with pytest.raises(DataError, match='same side'):
        load_messages(write_lines(tmp_path / 'm.jsonl', [same_side]), toy_users)
    unknown = dict(good, receiver_id='X9')
    with pytest.raises(DataError, match='X9'):
        load_messages(write_lines(tmp_path / 'm.jsonl', [unknown]), toy_users)
    bad_kind = dict(good, kind='wink')
    with pytest.raises(DataError, match='kind'):
        load_messages(write_lines(tmp_path / 'm.jsonl', [bad_kind]), toy_users)


def test_contact_index_counts_tokens_and_distinct_contacts():
    log = MessageLog([
        MessageEvent('F1', 'M1', 1),
        MessageEvent('F1', 'M1', 2),
        MessageEvent('F1', 'M2', 3),
        MessageEvent('M2', 'F1', 4, kind='reply'),
    ])
    assert log.contacts('F1') == ('M1', 'M1', 'M2')
    assert log.k('F1') == 2
    assert log.k('nobody') == 0
    assert len(log.initiations()) == 3
    assert len(log.restricted_to(['F1', 'M1'])) == 2


def test_plan_rejects_non_increasing_boundaries():
    with pytest.raises(DataError, match='increasing'):
        DiscretizationPlan({'age': [18, 30, 30, 99]})
    with pytest.raises(DataError):
        DiscretizationPlan({'age': [18]})


def test_plan_bins_are_half_open_with_closed_last_interval():
    plan = DiscretizationPlan({'age': [18, 26, 40, 99]})
    assert plan.bin('age', 18) == 0
    assert plan.bin('age', 25.9) == 0
    assert plan.bin('age', 26) == 1
    assert plan.bin('age', 99) == 2
    assert list(plan.bins('age', np.array([18, 26, 40, 99]))) == [0, 1, 2, 2]
    with pytest.raises(DataError, match='outside'):
        plan.bin('age', 100, 'u7')


def test_plan_file_drops_config_echo(tmp_path, toy_plan):
    path = str(tmp_path / 'plan.json')
    toy_plan.save(path, config={'seed': 1})
    assert DiscretizationPlan.load(path) == toy_plan


def test_feature_space_enumeration_is_bijective(toy_plan):
    space = FeatureSpace(toy_plan)
    assert space.size == 48 == len(space)
    ids = [space.id_of(space.tuple_of(i)) for i in range(space.size)]
    assert ids == list(range(space.size))
    with pytest.raises(DataError):
        space.tuple_of(48)


def test_feature_space_needs_every_pair_feature():
    with pytest.raises(DataError, match='missing'):
        FeatureSpace(DiscretizationPlan({'age': [18, 99]}))


def test_pair_tuple_uses_receiver_bins_and_differences(toy_users, toy_plan):
    t = pair_feature_tuple(toy_users['F1'], toy_users['M2'], toy_plan)
    # M2: age 35, weight 80, income 8 vs 3, lives_apart, 172 vs 160 cm
    assert t == FeatureTuple(age=1, weight=1, income_dif=1, child_info=2, height_dif=1)
    back = pair_feature_tuple(toy_users['M2'], toy_users['F1'], toy_plan)
    assert back == FeatureTuple(age=0, weight=0, income_dif=0, child_info=0, height_dif=0)
    with pytest.raises(DataError, match='same side'):
        pair_feature_tuple(toy_users['F1'], toy_users['F2'], toy_plan)


def test_absolute_income_difference_option(toy_users):
    plan = DiscretizationPlan({
        'age': [18, 99], 'weight': [30, 200], 'income_dif': [0, 3, 10], 'height_dif': [-100, 100],
    }, income_dif_absolute=True)
    # |3 - 8| = 5 lands in the upper interval either way round
    assert pair_feature_tuple(toy_users['F1'], toy_users['M2'], plan).income_dif == 1
    assert pair_feature_tuple(toy_users['M2'], toy_users['F1'], plan).income_dif == 1
    assert DiscretizationPlan.from_dict(plan.to_dict()).income_dif_absolute


def test_profile_tuple_takes_differences_at_zero(toy_users, toy_plan):
    t = profile_tuple(toy_users['F2'], toy_plan)
    assert t == FeatureTuple(age=1, weight=1, income_dif=1, child_info=1, height_dif=1)


def test_pair_encoder_agrees_with_pairwise_tuples(toy_users, toy_plan):
    encoder = PairEncoder(toy_users, toy_plan)
    space = encoder.space
    for s in toy_users:
        others = [u for u in toy_users if u.gender != s.gender]
        ids = encoder.ids(encoder.row[s.user_id], encoder.rows_of(u.user_id for u in others))
        expected = [space.id_of(pair_feature_tuple(s, r, toy_plan)) for r in others]
        assert list(ids) == expected


@pytest.mark.parametrize('absolute', [False, True])
def test_pair_encoder_sees_one_receiver_from_every_suitor(toy_users, toy_plan, absolute):
    plan = DiscretizationPlan(toy_plan.boundaries, income_dif_absolute=absolute)
    encoder = PairEncoder(toy_users, plan)
    for r in toy_users:
        suitors = [u for u in toy_users if u.gender != r.gender]
        ids = encoder.ids_seen_by(encoder.row[r.user_id], encoder.rows_of(u.user_id for u in suitors))
        assert list(ids) == [encoder.space.id_of(pair_feature_tuple(s, r, plan)) for s in suitors]
    with pytest.raises(DataError, match='same-side'):
        encoder.ids_seen_by(encoder.row['F1'], encoder.rows_of(['F2']))


def test_initiation_frame_rows_and_bins(toy_users, toy_log, toy_plan):
    raw = initiation_frame(toy_users, toy_log)
    assert len(raw) == 6
    assert raw['replied'].sum() == 3
    first = raw.iloc[0]
    assert first['income_dif'] == 4 - 3 and first['height_dif'] == 178 - 160

    binned = initiation_frame(toy_users, toy_log, toy_plan)
    assert set(binned['age']) <= {0, 1}
    assert set(binned['height_dif']) <= {0, 1}


def test_initiation_frame_of_empty_log(toy_users):
    assert initiation_frame(toy_users, MessageLog()).empty


def test_user_set_subset_keeps_order(toy_users):
    subset = toy_users.subset(['M1', 'F1'])
    assert subset.ids == ['F1', 'M1']
    assert isinstance(subset, UserSet)
