"""
Synthetic dating market with known answers: profiles drawn from marginals, typed
ground-truth preferences over feature tuples, first contacts chosen from
recommendation pools drawn uniformly from the opposite gender, and replies driven by
the receiver's true type.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.optimize import brentq

from .domain import (
    FEATURE_DOMAINS,
    GENDERS,
    REQUIRED_FEATURES,
    DiscretizationPlan,
    FeatureSpace,
    MessageEvent,
    MessageLog,
    PairEncoder,
    UserProfile,
    UserSet,
    opposite,
    profile_tuple,
)
from .errors import DataError
from .utils import read_json, substream, write_json

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')
DEFAULT_MARGINALS = os.path.join(DATA_DIR, 'marginals.yml')
DEFAULT_PLAN = os.path.join(DATA_DIR, 'sim_plan.json')

BASE_TS = 1_300_000_000
TYPE_ASSIGNMENTS = ('uniform', 'profile')


class Marginals(object):
    """Categorical marginal per feature, with optional per-gender replacements."""

    def __init__(self, features: Mapping[str, Mapping], by_gender: Optional[Mapping[str, Mapping]] = None):
        self.features = {name: self._validate(name, spec) for name, spec in (features or {}).items()}
        self.by_gender = {
            g: {name: self._validate(name, spec) for name, spec in specs.items()}
            for g, specs in (by_gender or {}).items()
        }
        for g in self.by_gender:
            if g not in GENDERS:
                raise DataError(f'marginals: unknown gender {g!r}')
        for g in GENDERS:
            missing = [f for f in REQUIRED_FEATURES if f not in self.for_gender(g)]
            if missing:
                raise DataError(f'marginals: no marginal for {missing} (gender {g})')

    @staticmethod
    def _validate(name, spec) -> Tuple[List, np.ndarray]:
        values, probs = list(spec.get('values', [])), np.asarray(spec.get('probs', []), dtype=float)
        if not values or len(values) != len(probs):
            raise DataError(f'marginals: {name} needs as many probs as values')
        if (probs < 0).any() or abs(probs.sum() - 1) > 1e-6:
            raise DataError(f'marginals: probs of {name} should be nonnegative and sum to 1')
        if name in FEATURE_DOMAINS:
            lo, hi = FEATURE_DOMAINS[name]
            bad = [v for v in values if not lo <= v <= hi]
            if bad:
                raise DataError(f'marginals: values {bad} of {name} outside [{lo}, {hi}]')
        return values, probs / probs.sum()

    def for_gender(self, gender: str) -> Dict[str, Tuple[List, np.ndarray]]:
        merged = dict(self.features)
        merged.update(self.by_gender.get(gender, {}))
        return merged

    @classmethod
    def load(cls, path: Optional[str] = None) -> 'Marginals':
        path = path or DEFAULT_MARGINALS
        try:
            with open(path, 'r') as f:
                d = yaml.load(f, yaml.SafeLoader)
        except FileNotFoundError:
            raise DataError(f'{path}: file not found')
        except yaml.YAMLError as e:
            raise DataError(f'{path}: malformed YAML ({e})')
        if not isinstance(d, dict) or 'features' not in d:
            raise DataError(f'{path}: expected a "features" mapping')
        return cls(d['features'], d.get('by_gender'))


@dataclass
class SimConfig:
    users_per_gender: int = 20000
    types_per_gender: int = 4
    recommendations_per_user: int = 100
    k_max: int = 10
    favorite_fraction: float = 0.05
    favorite_weights: Tuple[float, float] = (300.0, 500.0)
    other_weights: Tuple[float, float] = (1.0, 2.0)
    target_reply_rate: float = 0.17
    cities: int = 1
    dedupe_repeats: bool = False
    type_assignment: str = 'uniform'
    emit_reply_events: bool = True
    marginals: Marginals = field(default_factory=Marginals.load)
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ('users_per_gender', 'types_per_gender', 'recommendations_per_user', 'cities'):
            if getattr(self, name) < 1:
                raise DataError(f'sim: {name} should be positive')
        if self.k_max < 0:
            raise DataError('sim: k_max should be nonnegative')
        if not 0 < self.favorite_fraction < 1:
            raise DataError('sim: favorite_fraction should lie in (0, 1)')
        for name in ('favorite_weights', 'other_weights'):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise DataError(f'sim: {name} should be an ordered positive range')
        if not 0 < self.target_reply_rate < 1:
            raise DataError('sim: target_reply_rate should lie in (0, 1)')
        if self.type_assignment not in TYPE_ASSIGNMENTS:
            raise DataError(f'sim: type_assignment should be one of {TYPE_ASSIGNMENTS}')

    @classmethod
    def from_run_config(cls, cfg) -> 'SimConfig':
        sim = cfg.sim
        return cls(
            users_per_gender=sim.users_per_gender,
            types_per_gender=sim.types_per_gender,
            recommendations_per_user=sim.recommendations_per_user,
            k_max=sim.k_max,
            favorite_fraction=sim.favorite_fraction,
            favorite_weights=(sim.favorite_weight_low, sim.favorite_weight_high),
            other_weights=(sim.other_weight_low, sim.other_weight_high),
            target_reply_rate=sim.target_reply_rate,
            cities=sim.cities,
            dedupe_repeats=sim.dedupe_repeats,
            type_assignment=sim.type_assignment,
            emit_reply_events=sim.emit_reply_events,
            marginals=Marginals.load(cfg['paths.marginals']),
            seed=cfg.require_seed(),
        )


def generate_profiles(cfg: SimConfig) -> UserSet:
    """users_per_gender users per side, ids F00000.../M00000..., cities assigned round-robin."""
    width = max(5, len(str(cfg.users_per_gender - 1)))
    profiles = []
    for gender in GENDERS:
        rng = substream(cfg.seed, 'profiles', gender)
        n = cfg.users_per_gender
        columns = {}
        for name, (values, probs) in cfg.marginals.for_gender(gender).items():
            columns[name] = [values[i] for i in rng.choice(len(values), size=n, p=probs)]
        for i in range(n):
            features = {name: column[i] for name, column in columns.items()}
            features['city'] = f'c{i % cfg.cities:02d}'
            profiles.append(UserProfile(f'{gender}{i:0{width}d}', gender, features))
    return UserSet(profiles)


@dataclass
class TruePreferences:
    """p[g][t] is the distribution over feature tuples that type t of gender g writes to."""
    p: Dict[str, np.ndarray]
    favorites: Dict[str, List[np.ndarray]]
    plan: DiscretizationPlan

    @property
    def types_per_gender(self) -> int:
        return next(iter(self.p.values())).shape[0]

    def to_dict(self):
        return {
            'preferences': self.p,
            'favorites': {g: [sorted(int(v) for v in fav) for fav in favs] for g, favs in self.favorites.items()},
            'feature_space': {
                'plan': self.plan.to_dict(),
                'hash': FeatureSpace(self.plan).fingerprint,
                'size': FeatureSpace(self.plan).size,
            },
        }

    @classmethod
    def from_dict(cls, d) -> 'TruePreferences':
        plan = DiscretizationPlan.from_dict(d['feature_space']['plan'])
        return cls(
            p={g: np.asarray(rows, dtype=float) for g, rows in d['preferences'].items()},
            favorites={g: [np.asarray(f, dtype=int) for f in favs] for g, favs in d['favorites'].items()},
            plan=plan,
        )


def generate_true_preferences(cfg: SimConfig, space: FeatureSpace, rng: np.random.Generator) -> TruePreferences:
    V = space.size
    if V < 20:
        raise DataError(f'feature space of {V} tuples is too small for favorite sets (need at least 20)')
    n_favorites = int(round(cfg.favorite_fraction * V))
    p, favorites = {}, {}
    for gender in GENDERS:
        rows, favs = [], []
        for _ in range(cfg.types_per_gender):
            fav = rng.choice(V, size=n_favorites, replace=False)
            weights = rng.uniform(*cfg.other_weights, size=V)
            weights[fav] = rng.uniform(*cfg.favorite_weights, size=n_favorites)
            rows.append(weights / weights.sum())
            favs.append(np.sort(fav))
        p[gender] = np.vstack(rows)
        favorites[gender] = favs
    return TruePreferences(p, favorites, space.plan)


@dataclass
class Simulation:
    users: UserSet
    log: MessageLog
    labels: Dict[str, int]
    prefs: TruePreferences
    candidates: Dict[str, List[str]] = field(default_factory=dict)
    reply_scale: Optional[float] = None

    def truth_dict(self, include_candidates: bool = True):
        d = self.prefs.to_dict()
        d['types'] = self.labels
        d['reply_scale'] = self.reply_scale
        if include_candidates:
            d['candidates'] = self.candidates
        return d


def assign_types(users: UserSet, cfg: SimConfig, space: FeatureSpace) -> Dict[str, int]:
    labels = {}
    for gender in GENDERS:
        side = users.by_gender(gender)
        if cfg.type_assignment == 'uniform':
            draws = substream(cfg.seed, 'types', gender).integers(0, cfg.types_per_gender, size=len(side))
            labels.update({u.user_id: int(t) for u, t in zip(side, draws)})
        else:
            labels.update({
                u.user_id: space.id_of(profile_tuple(u, space.plan)) % cfg.types_per_gender for u in side
            })
        counts = np.bincount([labels[u.user_id] for u in side], minlength=cfg.types_per_gender)
        if len(side) and (counts == 0).any():
            logger.warning('true type(s) %s of gender %s have no users', np.flatnonzero(counts == 0).tolist(), gender)
    return labels


def simulate_messages(users: UserSet, prefs: TruePreferences, cfg: SimConfig):
    """
    Returns (MessageLog of initiations, true type per user, candidate pool per user).
    Pools are drawn without replacement from the opposite-gender users of the same city;
    with a single city (the default) that is the whole opposite gender.
    Each user draws k ~ U{0..k_max} receivers from its pool by a multinomial weighted with
    its type's preference for each candidate's tuple; repeated picks are repeated messages.
    """
    space = FeatureSpace(prefs.plan)
    for gender in GENDERS:
        if not users.by_gender(gender):
            raise DataError(f'simulation needs users of both genders, none of gender {gender}')
    labels = assign_types(users, cfg, space)
    encoder = PairEncoder(users, prefs.plan, space)
    city = np.array([encoder.profiles[i].features.get('city', '') for i in range(len(encoder.user_ids))])
    pools: Dict[Tuple[str, str], np.ndarray] = {}
    for g in GENDERS:
        for c in np.unique(city):
            pools[(g, c)] = np.flatnonzero((encoder.gender == g) & (city == c))

    events, candidates = [], {}
    for row, user_id in enumerate(encoder.user_ids):
        rng = substream(cfg.seed, 'messages', user_id)
        gender = encoder.gender[row]
        pool = pools.get((opposite(gender), city[row]), np.zeros(0, dtype=int))
        if len(pool) == 0:
            candidates[user_id] = []
            continue
        L = rng.choice(pool, size=min(cfg.recommendations_per_user, len(pool)), replace=False)
        candidates[user_id] = [encoder.user_ids[r] for r in L]
        k = int(rng.integers(0, cfg.k_max + 1))
        if k == 0:
            continue
        weights = prefs.p[gender][labels[user_id]][encoder.ids(row, L)]
        picks = rng.multinomial(k, weights / weights.sum())
        n_sent = 0
        for j in np.flatnonzero(picks):
            for _ in range(1 if cfg.dedupe_repeats else int(picks[j])):
                events.append(MessageEvent(user_id, encoder.user_ids[L[j]], BASE_TS + row * 3600 + n_sent * 60))
                n_sent += 1
    logger.info('simulated %d first contacts from %d users', len(events), len(encoder.user_ids))
    return MessageLog(events), labels, candidates


def reply_probabilities(log: MessageLog, prefs: TruePreferences, labels: Mapping[str, int],
                        users: UserSet) -> np.ndarray:
    """p of the suitor's tuple (as the receiver sees it) under the receiver's true type, per initiation."""
    encoder = PairEncoder(users, prefs.plan)
    initiations = [(i, e) for i, e in enumerate(log.events) if e.kind == 'init']
    by_receiver: Dict[str, List[int]] = {}
    for n, (_, e) in enumerate(initiations):
        by_receiver.setdefault(e.receiver_id, []).append(n)
    p = np.zeros(len(initiations))
    for receiver, positions in by_receiver.items():
        r = encoder.row[receiver]
        senders = encoder.rows_of(initiations[n][1].sender_id for n in positions)
        p[positions] = prefs.p[encoder.gender[r]][labels[receiver]][encoder.ids(r, senders)]
    return p


def calibrate_reply_scale(p: np.ndarray, target: float) -> float:
    """c such that mean(min(1, c p)) equals the target reply rate."""
    positive = p[p > 0]
    if len(positive) == 0:
        raise DataError('no initiation has a positive reply probability')
    if target >= len(positive) / len(p):
        raise DataError(f'target reply rate {target} is not reachable')
    return float(brentq(lambda c: np.minimum(1.0, c * p).mean() - target, 0.0, 1.0 / positive.min(), xtol=1e-14))


def simulate_replies(log: MessageLog, prefs: TruePreferences, labels: Mapping[str, int],
                     users: UserSet, cfg: SimConfig) -> Tuple[MessageLog, float]:
    """
    Marks each initiation replied with probability min(1, c p), c calibrated to the target
    reply rate; with emit_reply_events a reply event follows every replied initiation.
    """
    p = reply_probabilities(log, prefs, labels, users)
    if len(p) == 0:
        return log, 0.0
    scale = calibrate_reply_scale(p, cfg.target_reply_rate)
    replied = substream(cfg.seed, 'replies').random(len(p)) < np.minimum(1.0, scale * p)

    events, n = [], 0
    for e in log.events:
        if e.kind != 'init':
            events.append(e)
            continue
        events.append(MessageEvent(e.sender_id, e.receiver_id, e.ts, bool(replied[n]), 'init'))
        if replied[n] and cfg.emit_reply_events:
            events.append(MessageEvent(e.receiver_id, e.sender_id, e.ts + 1, False, 'reply'))
        n += 1
    logger.info('reply rate %.4f (scale %.4g)', replied.mean(), scale)
    return MessageLog(events), scale


def simulate_market(cfg: SimConfig, plan: Optional[DiscretizationPlan] = None, replies: bool = True) -> Simulation:
    plan = plan or DiscretizationPlan.load(DEFAULT_PLAN)
    space = FeatureSpace(plan)
    users = generate_profiles(cfg)
    prefs = generate_true_preferences(cfg, space, substream(cfg.seed, 'preferences'))
    log, labels, candidates = simulate_messages(users, prefs, cfg)
    scale = None
    if replies:
        log, scale = simulate_replies(log, prefs, labels, users, cfg)
    return Simulation(users, log, labels, prefs, candidates, scale)


def save_truth(path: str, sim: Simulation, config: Optional[dict] = None, include_candidates: bool = True):
    d = sim.truth_dict(include_candidates)
    if config is not None:
        d['config'] = config
    write_json(path, d)


def load_truth(path: str) -> Tuple[TruePreferences, Dict[str, int]]:
    d = read_json(path)
    for key in ('preferences', 'favorites', 'feature_space', 'types'):
        if key not in d:
            raise DataError(f'{path}: missing "{key}"')
    return TruePreferences.from_dict(d), {u: int(t) for u, t in d['types'].items()}
