import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from matchlib.domain import DiscretizationPlan, FeatureSpace, MessageEvent, MessageLog, UserProfile, UserSet  # noqa: E402
from matchlib.lda import Hyperparams, SideModel, TrainedModel  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale run, skipped unless --runslow is given')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_user(user_id, gender, age=25, weight=55, height=165, income_level=5, child_info='none', **extra):
    features = dict(age=age, weight=weight, height=height, income_level=income_level, child_info=child_info)
    features.update(extra)
    return UserProfile(user_id, gender, features)


@pytest.fixture
def user_factory():
    return make_user


@pytest.fixture
def toy_plan():
    """2 x 2 x 2 x 3 x 2 = 48 tuples."""
    return DiscretizationPlan({
        'age': [18, 30, 99],
        'weight': [30, 60, 200],
        'income_dif': [-10, 0, 10],
        'height_dif': [-100, 0, 100],
    })


@pytest.fixture
def toy_users():
    return UserSet([
        make_user('F1', 'F', age=24, weight=50, height=160, income_level=3),
        make_user('F2', 'F', age=33, weight=62, height=170, income_level=7, child_info='lives_with'),
        make_user('F3', 'F', age=28, weight=55, height=158, income_level=5),
        make_user('M1', 'M', age=27, weight=70, height=178, income_level=4),
        make_user('M2', 'M', age=35, weight=80, height=172, income_level=8, child_info='lives_apart'),
        make_user('M3', 'M', age=22, weight=58, height=168, income_level=2),
    ])


@pytest.fixture
def toy_log():
    def msg(s, r, ts, replied=False, kind='init'):
        return MessageEvent(s, r, ts, replied, kind)
    return MessageLog([
        msg('F1', 'M1', 100, True),
        msg('M1', 'F1', 101, kind='reply'),
        msg('F1', 'M2', 110),
        msg('F2', 'M2', 120, True),
        msg('M2', 'F2', 121, kind='reply'),
        msg('M3', 'F3', 130),
        msg('M3', 'F1', 140, True),
        msg('F1', 'M3', 141, kind='reply'),
        msg('M1', 'F2', 150),
    ])


def random_model(users, plan, T=2, seed=0, trained=None):
    """TrainedModel with random row-stochastic preferences; every user in `trained` gets a random mu."""
    rng = np.random.default_rng(seed)
    space = FeatureSpace(plan)
    hp = Hyperparams.defaults(T, space.size)
    trained = list(users.ids) if trained is None else list(trained)
    sides = {}
    for gender in ('F', 'M'):
        ids = [u for u in trained if users[u].gender == gender]
        sides[gender] = SideModel(
            phi=rng.dirichlet(np.ones(space.size), size=T),
            user_ids=ids,
            mu=rng.dirichlet(np.ones(T), size=len(ids)).reshape(len(ids), T),
            q={},
            q_prior=np.full(T, 1.0 / T),
            type_counts=np.zeros(T, dtype=np.int64),
        )
    return TrainedModel(hp, plan, sides)


@pytest.fixture
def model_factory():
    return random_model
