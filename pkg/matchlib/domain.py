"""
Profiles, messages, discretization plans and the enumerated feature-tuple space.

A user has no standalone feature tuple: two of the five tuple components are
differences to the user looking at them, so tuples only exist for (suitor, receiver)
pairs. See pair_feature_tuple.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError
from .utils import dumps, read_json, read_jsonl, text_digest, write_json, write_jsonl

logger = logging.getLogger(__name__)

GENDERS = ('F', 'M')
CHILD_INFO_VALUES = ('none', 'lives_with', 'lives_apart')
# declared ranges of the raw numeric features, inclusive
FEATURE_DOMAINS = {
    'age': (18, 99),
    'weight': (30, 200),
    'height': (130, 230),
    'income_level': (0, 10),
}
REQUIRED_FEATURES = ('age', 'weight', 'height', 'income_level', 'child_info')
TUPLE_FIELDS = ('age', 'weight', 'income_dif', 'child_info', 'height_dif')
PLAN_FEATURES = ('age', 'weight', 'income_dif', 'height_dif')
MESSAGE_KINDS = ('init', 'reply')

FeatureValue = Union[int, float, str]


def opposite(gender: str) -> str:
    return 'M' if gender == 'F' else 'F'


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    gender: str
    features: Mapping[str, FeatureValue] = field(default_factory=dict)

    def __getitem__(self, feature):
        return self.features[feature]

    def to_dict(self):
        return {'user_id': self.user_id, 'gender': self.gender, 'features': dict(self.features)}


def _validate_profile(obj, where: str) -> UserProfile:
    for key in ('user_id', 'gender', 'features'):
        if key not in obj:
            raise DataError(f'{where}: missing "{key}"')
    user_id, gender, features = obj['user_id'], obj['gender'], obj['features']
    if not isinstance(user_id, str) or not user_id:
        raise DataError(f'{where}: user_id should be a non-empty string')
    if gender not in GENDERS:
        raise DataError(f'{where}: gender of user {user_id} should be one of {GENDERS}, got {gender!r}')
    if not isinstance(features, dict):
        raise DataError(f'{where}: features of user {user_id} should be an object')
    for name in REQUIRED_FEATURES:
        value = features.get(name)
        if value is None:
            raise DataError(f'{where}: user {user_id} is missing feature {name}')
    for name, (lo, hi) in FEATURE_DOMAINS.items():
        value = features[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f'{where}: feature {name} of user {user_id} should be numeric')
        if not lo <= value <= hi:
            raise DataError(f'{where}: feature {name}={value} of user {user_id} outside [{lo}, {hi}]')
    if isinstance(features['income_level'], float) and not features['income_level'].is_integer():
        raise DataError(f'{where}: income_level of user {user_id} should be an integer')
    if features['child_info'] not in CHILD_INFO_VALUES:
        raise DataError(
            f'{where}: child_info of user {user_id} should be one of {CHILD_INFO_VALUES}, '
            f'got {features["child_info"]!r}'
        )
    for name, value in features.items():
        if value is None:
            raise DataError(f'{where}: feature {name} of user {user_id} is null')
    return UserProfile(user_id, gender, dict(features))


class UserSet(object):
    """Profiles keyed by user id, in insertion order."""

    def __init__(self, profiles: Iterable[UserProfile] = ()):
        self._users: Dict[str, UserProfile] = {}
        for profile in profiles:
            if profile.user_id in self._users:
                raise DataError(f'duplicate user_id {profile.user_id}')
            self._users[profile.user_id] = profile

    def __len__(self):
        return len(self._users)

    def __iter__(self) -> Iterator[UserProfile]:
        return iter(self._users.values())

    def __contains__(self, user_id):
        return user_id in self._users

    def __getitem__(self, user_id) -> UserProfile:
        try:
            return self._users[user_id]
        except KeyError:
            raise DataError(f'unknown user {user_id}')

    def __eq__(self, other):
        return isinstance(other, UserSet) and list(self._users.items()) == list(other._users.items())

    @property
    def ids(self) -> List[str]:
        return list(self._users)

    def by_gender(self, gender: str) -> List[UserProfile]:
        return [u for u in self._users.values() if u.gender == gender]

    def subset(self, user_ids: Iterable[str]) -> 'UserSet':
        wanted = set(user_ids)
        return UserSet(u for u in self._users.values() if u.user_id in wanted)

    def save(self, path: str):
        write_jsonl(path, (u.to_dict() for u in self))


def load_users(path: str) -> UserSet:
    profiles = []
    seen = set()
    for lineno, obj in read_jsonl(path):
        profile = _validate_profile(obj, f'{path}:{lineno}')
        if profile.user_id in seen:
            raise DataError(f'{path}:{lineno}: duplicate user_id {profile.user_id}')
        seen.add(profile.user_id)
        profiles.append(profile)
    logger.info('loaded %d users from %s', len(profiles), path)
    return UserSet(profiles)


@dataclass(frozen=True)
class MessageEvent:
    sender_id: str
    receiver_id: str
    ts: int
    replied: bool = False
    kind: str = 'init'

    def to_dict(self):
        return {
            'sender_id': self.sender_id,
            'receiver_id': self.receiver_id,
            'ts': self.ts,
            'replied': self.replied,
            'kind': self.kind,
        }


class MessageLog(object):
    """
    Ordered message events plus a per-sender contact index. contacts(d) lists the
    counterparts d wrote to, one entry per message (the tokens of d); k(d) counts the
    distinct ones.
    """

    def __init__(self, events: Iterable[MessageEvent] = ()):
        self.events: Tuple[MessageEvent, ...] = tuple(events)
        index: Dict[str, List[str]] = {}
        for e in self.events:
            index.setdefault(e.sender_id, []).append(e.receiver_id)
        self._contacts = {user: tuple(contacts) for user, contacts in index.items()}

    def __len__(self):
        return len(self.events)

    def __iter__(self) -> Iterator[MessageEvent]:
        return iter(self.events)

    def __eq__(self, other):
        return isinstance(other, MessageLog) and self.events == other.events

    @property
    def senders(self) -> List[str]:
        return list(self._contacts)

    def contacts(self, user_id: str) -> Tuple[str, ...]:
        return self._contacts.get(user_id, ())

    def k(self, user_id: str) -> int:
        return len(set(self._contacts.get(user_id, ())))

    def initiations(self) -> List[MessageEvent]:
        return [e for e in self.events if e.kind == 'init']

    def restricted_to(self, user_ids: Iterable[str]) -> 'MessageLog':
        """Events whose sender and receiver are both in user_ids."""
        keep = set(user_ids)
        return MessageLog(e for e in self.events if e.sender_id in keep and e.receiver_id in keep)

    def save(self, path: str):
        write_jsonl(path, (e.to_dict() for e in self.events))


def load_messages(path: str, users: UserSet) -> MessageLog:
    events = []
    for lineno, obj in read_jsonl(path):
        where = f'{path}:{lineno}'
        for key in ('sender_id', 'receiver_id', 'ts', 'replied', 'kind'):
            if key not in obj:
                raise DataError(f'{where}: missing "{key}"')
        sender, receiver = obj['sender_id'], obj['receiver_id']
        if sender == receiver:
            raise DataError(f'{where}: sender and receiver are the same user {sender}')
        for user_id in (sender, receiver):
            if user_id not in users:
                raise DataError(f'{where}: unknown user {user_id}')
        if users[sender].gender == users[receiver].gender:
            raise DataError(f'{where}: {sender} and {receiver} are on the same side of the market')
        if isinstance(obj['ts'], bool) or not isinstance(obj['ts'], int):
            raise DataError(f'{where}: ts should be an integer')
        if not isinstance(obj['replied'], bool):
            raise DataError(f'{where}: replied should be a boolean')
        if obj['kind'] not in MESSAGE_KINDS:
            raise DataError(f'{where}: kind should be one of {MESSAGE_KINDS}')
        events.append(MessageEvent(sender, receiver, obj['ts'], obj['replied'], obj['kind']))
    logger.info('loaded %d messages from %s', len(events), path)
    return MessageLog(events)


class DiscretizationPlan(object):
    """
    Ordered interval boundaries per feature. Boundaries [b0, b1, ..., bk] define k
    intervals [b0, b1), ..., [b_{k-1}, bk]; the last one is closed.
    """

    def __init__(self, boundaries: Mapping[str, Sequence[float]], income_dif_absolute: bool = False):
        self.boundaries: Dict[str, Tuple[float, ...]] = {}
        for name, bounds in boundaries.items():
            bounds = tuple(bounds)
            if len(bounds) < 2:
                raise DataError(f'plan for {name} needs at least two boundaries')
            if any(b >= c for b, c in zip(bounds, bounds[1:])):
                raise DataError(f'plan boundaries for {name} should be strictly increasing')
            self.boundaries[name] = bounds
        self.income_dif_absolute = bool(income_dif_absolute)
        self._arrays = {name: np.asarray(b, dtype=float) for name, b in self.boundaries.items()}

    def __eq__(self, other):
        return (
            isinstance(other, DiscretizationPlan)
            and self.boundaries == other.boundaries
            and self.income_dif_absolute == other.income_dif_absolute
        )

    def __contains__(self, feature):
        return feature in self.boundaries

    def n_bins(self, feature: str) -> int:
        return len(self.boundaries[feature]) - 1

    def range_of(self, feature: str) -> Tuple[float, float]:
        bounds = self.boundaries[feature]
        return bounds[0], bounds[-1]

    def bin(self, feature: str, value: float, user_id: Optional[str] = None) -> int:
        if feature not in self.boundaries:
            raise DataError(f'plan has no intervals for feature {feature}')
        bounds = self.boundaries[feature]
        if not bounds[0] <= value <= bounds[-1]:
            who = f' of user {user_id}' if user_id is not None else ''
            raise DataError(f'value {value} of feature {feature}{who} outside plan range [{bounds[0]}, {bounds[-1]}]')
        idx = int(np.searchsorted(self._arrays[feature], value, side='right')) - 1
        return min(idx, len(bounds) - 2)

    def bins(self, feature: str, values: np.ndarray) -> np.ndarray:
        """Vectorized bin; raises on the first out-of-range value."""
        arr = self._arrays[feature]
        values = np.asarray(values, dtype=float)
        bad = (values < arr[0]) | (values > arr[-1])
        if bad.any():
            raise DataError(
                f'value {values[bad][0]} of feature {feature} outside plan range [{arr[0]}, {arr[-1]}]'
            )
        idx = np.searchsorted(arr, values, side='right') - 1
        return np.minimum(idx, len(arr) - 2)

    def to_dict(self):
        d = {name: list(b) for name, b in self.boundaries.items()}
        d['options'] = {'income_dif_absolute': self.income_dif_absolute}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> 'DiscretizationPlan':
        d = dict(d)
        options = d.pop('options', {}) or {}
        d.pop('config', None)
        return cls(d, income_dif_absolute=options.get('income_dif_absolute', False))

    def save(self, path: str, config: Optional[dict] = None):
        d = self.to_dict()
        if config is not None:
            d['config'] = config
        write_json(path, d)

    @classmethod
    def load(cls, path: str) -> 'DiscretizationPlan':
        return cls.from_dict(read_json(path))

    def validate_for_tuples(self):
        missing = [f for f in PLAN_FEATURES if f not in self.boundaries]
        if missing:
            raise DataError(f'plan is missing intervals for {missing}')


class FeatureTuple(NamedTuple):
    age: int
    weight: int
    income_dif: int
    child_info: int
    height_dif: int


def income_difference(suitor: UserProfile, receiver: UserProfile, plan: DiscretizationPlan) -> float:
    dif = receiver['income_level'] - suitor['income_level']
    return abs(dif) if plan.income_dif_absolute else dif


def pair_feature_tuple(suitor: UserProfile, receiver: UserProfile, plan: DiscretizationPlan) -> FeatureTuple:
    """The receiver's tuple as seen by the suitor."""
    if suitor.gender == receiver.gender:
        raise DataError(f'{suitor.user_id} and {receiver.user_id} are on the same side of the market')
    rid = receiver.user_id
    return FeatureTuple(
        age=plan.bin('age', receiver['age'], rid),
        weight=plan.bin('weight', receiver['weight'], rid),
        income_dif=plan.bin('income_dif', income_difference(suitor, receiver, plan), rid),
        child_info=CHILD_INFO_VALUES.index(receiver['child_info']),
        height_dif=plan.bin('height_dif', receiver['height'] - suitor['height'], rid),
    )


def profile_tuple(user: UserProfile, plan: DiscretizationPlan) -> FeatureTuple:
    """The user's own features with both difference components taken at zero offset."""
    uid = user.user_id
    return FeatureTuple(
        age=plan.bin('age', user['age'], uid),
        weight=plan.bin('weight', user['weight'], uid),
        income_dif=plan.bin('income_dif', 0, uid),
        child_info=CHILD_INFO_VALUES.index(user['child_info']),
        height_dif=plan.bin('height_dif', 0, uid),
    )


class FeatureSpace(object):
    """
    Dense bijective enumeration of every feature tuple the plan can produce. The plan is
    gender-independent, so both market sides share this enumeration.
    """

    def __init__(self, plan: DiscretizationPlan):
        plan.validate_for_tuples()
        self.plan = plan
        self.dims = (
            plan.n_bins('age'),
            plan.n_bins('weight'),
            plan.n_bins('income_dif'),
            len(CHILD_INFO_VALUES),
            plan.n_bins('height_dif'),
        )
        self.size = int(np.prod(self.dims))

    def __len__(self):
        return self.size

    def id_of(self, t: FeatureTuple) -> int:
        return int(np.ravel_multi_index(tuple(t), self.dims))

    def ids_of(self, columns: Sequence[np.ndarray]) -> np.ndarray:
        return np.ravel_multi_index(tuple(columns), self.dims)

    def tuple_of(self, tuple_id: int) -> FeatureTuple:
        if not 0 <= tuple_id < self.size:
            raise DataError(f'tuple id {tuple_id} outside 0..{self.size - 1}')
        return FeatureTuple(*(int(i) for i in np.unravel_index(tuple_id, self.dims)))

    @property
    def fingerprint(self) -> str:
        return text_digest(dumps(self.plan.to_dict()))


def apply_discretization(users: UserSet, plan: DiscretizationPlan) -> pd.DataFrame:
    """
    One row per user (index user_id): absolute bins of age and weight, the child_info code,
    and the raw height and income needed for pair differences.
    """
    rows = []
    for u in users:
        rows.append({
            'user_id': u.user_id,
            'gender': u.gender,
            'age_bin': plan.bin('age', u['age'], u.user_id),
            'weight_bin': plan.bin('weight', u['weight'], u.user_id),
            'child_info': CHILD_INFO_VALUES.index(u['child_info']),
            'height': float(u['height']),
            'income_level': float(u['income_level']),
        })
    columns = ['user_id', 'gender', 'age_bin', 'weight_bin', 'child_info', 'height', 'income_level']
    return pd.DataFrame(rows, columns=columns).set_index('user_id')


class PairEncoder(object):
    """Vectorized pair_feature_tuple: tuple ids of many receivers relative to one suitor."""

    def __init__(self, users: UserSet, plan: DiscretizationPlan, space: Optional[FeatureSpace] = None):
        self.plan = plan
        self.space = space or FeatureSpace(plan)
        frame = apply_discretization(users, plan)
        self.user_ids = list(frame.index)
        self.row = {uid: i for i, uid in enumerate(self.user_ids)}
        self.profiles = [users[uid] for uid in self.user_ids]
        self.gender = frame['gender'].to_numpy()
        self.age_bin = frame['age_bin'].to_numpy()
        self.weight_bin = frame['weight_bin'].to_numpy()
        self.child_info = frame['child_info'].to_numpy()
        self.height = frame['height'].to_numpy()
        self.income = frame['income_level'].to_numpy()

    def ids(self, suitor: int, receivers: np.ndarray) -> np.ndarray:
        receivers = np.asarray(receivers, dtype=int)
        if (self.gender[receivers] == self.gender[suitor]).any():
            raise DataError(f'same-side pair for suitor {self.user_ids[suitor]}')
        return self._pair_ids(np.full(len(receivers), suitor), receivers)

    def ids_seen_by(self, receiver: int, suitors: np.ndarray) -> np.ndarray:
        """Tuple ids of one receiver as each of the suitors sees it."""
        suitors = np.asarray(suitors, dtype=int)
        if (self.gender[suitors] == self.gender[receiver]).any():
            raise DataError(f'same-side pair for receiver {self.user_ids[receiver]}')
        return self._pair_ids(suitors, np.full(len(suitors), receiver))

    def _pair_ids(self, suitors: np.ndarray, receivers: np.ndarray) -> np.ndarray:
        income_dif = self.income[receivers] - self.income[suitors]
        if self.plan.income_dif_absolute:
            income_dif = np.abs(income_dif)
        return self.space.ids_of((
            self.age_bin[receivers],
            self.weight_bin[receivers],
            self.plan.bins('income_dif', income_dif),
            self.child_info[receivers],
            self.plan.bins('height_dif', self.height[receivers] - self.height[suitors]),
        ))

    def rows_of(self, user_ids: Iterable[str]) -> np.ndarray:
        return np.asarray([self.row[u] for u in user_ids], dtype=int)


def initiation_frame(users: UserSet, log: MessageLog, plan: Optional[DiscretizationPlan] = None,
                     income_dif_absolute: bool = False) -> pd.DataFrame:
    """
    One row per first contact: the receiver's features as the suitor sees them, with pair
    differences in place of income and height, and the reply label. With a plan, the
    interval features are replaced by their bin indices.
    """
    absolute = plan.income_dif_absolute if plan is not None else income_dif_absolute
    rows = []
    for e in log.initiations():
        suitor, receiver = users[e.sender_id], users[e.receiver_id]
        row = {k: v for k, v in receiver.features.items() if k not in ('height', 'income_level')}
        dif = receiver['income_level'] - suitor['income_level']
        row['income_dif'] = abs(dif) if absolute else dif
        row['height_dif'] = receiver['height'] - suitor['height']
        row['replied'] = e.replied
        rows.append(row)
    if not rows:
        return pd.DataFrame(columns=['age', 'weight', 'child_info', 'income_dif', 'height_dif', 'replied'])
    frame = pd.DataFrame(rows)
    if plan is not None:
        for feature in PLAN_FEATURES:
            frame[feature] = plan.bins(feature, frame[feature].to_numpy())
    return frame
