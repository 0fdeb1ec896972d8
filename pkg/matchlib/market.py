"""
The two-sided recommendation market: pair utilities, the max expected utility program
and the recommendation lists derived from its solution.

    max  sum_sr u_sr x_sr
    s.t. sum_r u_sr x_sr <= C_S(s)   for every suitor s
         sum_s u_sr x_sr <= C_R(r)   for every receiver r
         0 <= x_sr <= 1

With y_sr = u_sr x_sr this is a max-flow problem: source -> s (capacity C_S(s)),
s -> r (capacity u_sr), r -> sink (capacity C_R(r)).
"""
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .domain import GENDERS, DiscretizationPlan, FeatureSpace, PairEncoder, UserSet, opposite
from .errors import DataError, PlanViolationError
from .lda import TrainedModel, type_weight_matrix
from .utils import read_json, substream, write_json, write_jsonl

logger = logging.getLogger(__name__)

FLOW_EPS = 1e-12
PLAN_TOLERANCE = 1e-9
ORACLE_MAX_PAIRS = 12
MODES = ('deterministic', 'sampled')


@dataclass
class Capacities:
    send_default: float = 10.0
    recv_default: float = 20.0
    overrides: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.send_default < 0 or self.recv_default < 0:
            raise DataError('capacities should be nonnegative')
        for user_id, caps in self.overrides.items():
            for key, value in caps.items():
                if key not in ('send', 'recv'):
                    raise DataError(f'capacity override for {user_id} has unknown key {key}')
                if value < 0:
                    raise DataError(f'capacity override {key} of {user_id} should be nonnegative')

    def send(self, user_id: str) -> float:
        return float(self.overrides.get(user_id, {}).get('send', self.send_default))

    def recv(self, user_id: str) -> float:
        return float(self.overrides.get(user_id, {}).get('recv', self.recv_default))

    @classmethod
    def load(cls, path: str, send_default: float = 10.0, recv_default: float = 20.0) -> 'Capacities':
        """{"send_default": ..., "recv_default": ..., "users": {user_id: {"send": ..., "recv": ...}}}"""
        d = read_json(path)
        return cls(
            send_default=float(d.get('send_default', send_default)),
            recv_default=float(d.get('recv_default', recv_default)),
            overrides={u: {k: float(v) for k, v in caps.items()} for u, caps in d.get('users', {}).items()},
        )


@dataclass
class CandidateFilter:
    utility_floor: float = 1e-6
    top_k: Optional[int] = None
    # suitor id -> receiver ids it may be recommended; None allows everyone
    candidates: Optional[Mapping[str, Iterable[str]]] = None

    def __post_init__(self):
        if self.utility_floor < 0:
            raise DataError('utility floor should be nonnegative')
        if self.top_k is not None and self.top_k < 0:
            raise DataError('top_k should be nonnegative')
        if self.candidates is not None:
            self.candidates = {s: set(rs) for s, rs in self.candidates.items()}

    def select(self, suitor_id: str, receiver_ids: Sequence[str], u_row: np.ndarray) -> np.ndarray:
        """Positions in u_row that stay in the market, ascending."""
        keep = np.flatnonzero(u_row >= self.utility_floor)
        if self.candidates is not None:
            allowed = self.candidates.get(suitor_id, set())
            keep = keep[np.array([receiver_ids[j] in allowed for j in keep], dtype=bool)]
        if self.top_k is not None and len(keep) > self.top_k:
            best = np.argsort(-u_row[keep], kind='stable')[:self.top_k]
            keep = np.sort(keep[best])
        return keep


@dataclass
class MarketInstance:
    """
    Sparse pair utilities in coordinate form: pair i links suitor s_idx[i] to receiver
    r_idx[i] (indices into user_ids). Every user has a send and a receive capacity.
    """
    user_ids: List[str]
    s_idx: np.ndarray
    r_idx: np.ndarray
    u: np.ndarray
    C_S: np.ndarray
    C_R: np.ndarray

    def __post_init__(self):
        self.s_idx = np.asarray(self.s_idx, dtype=int)
        self.r_idx = np.asarray(self.r_idx, dtype=int)
        self.u = np.asarray(self.u, dtype=float)
        self.C_S = np.asarray(self.C_S, dtype=float)
        self.C_R = np.asarray(self.C_R, dtype=float)
        n = len(self.user_ids)
        if not len(self.s_idx) == len(self.r_idx) == len(self.u):
            raise DataError('pair arrays should have the same length')
        if self.C_S.shape != (n,) or self.C_R.shape != (n,):
            raise DataError('one send and one receive capacity per user')
        if (self.C_S < 0).any() or (self.C_R < 0).any():
            raise DataError('capacities should be nonnegative')
        if ((self.u < 0) | (self.u > 1)).any():
            raise DataError('pair utilities should lie in [0, 1]')
        if len(self.u) and (self.s_idx == self.r_idx).any():
            raise DataError('a user cannot be paired with itself')
        self.index = {user_id: i for i, user_id in enumerate(self.user_ids)}

    @property
    def n_pairs(self) -> int:
        return len(self.u)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[str, str, float]], send: Mapping[str, float],
                   recv: Mapping[str, float]) -> 'MarketInstance':
        """Hand-built instance; users are the keys of send and recv, in first-seen order."""
        user_ids = list(dict.fromkeys(list(send) + list(recv) + [p[0] for p in pairs] + [p[1] for p in pairs]))
        index = {u: i for i, u in enumerate(user_ids)}
        return cls(
            user_ids=user_ids,
            s_idx=[index[s] for s, _, _ in pairs],
            r_idx=[index[r] for _, r, _ in pairs],
            u=[u for _, _, u in pairs],
            C_S=[send.get(u, 0.0) for u in user_ids],
            C_R=[recv.get(u, 0.0) for u in user_ids],
        )

    def scaled(self, capacity_factor: float) -> 'MarketInstance':
        return MarketInstance(self.user_ids, self.s_idx, self.r_idx, self.u,
                              self.C_S * capacity_factor, self.C_R * capacity_factor)


def build_market(model: TrainedModel, users: UserSet, caps: Optional[Capacities] = None,
                 candidate_filter: Optional[CandidateFilter] = None,
                 plan: Optional[DiscretizationPlan] = None) -> MarketInstance:
    """
    u_sr = f(s, r) g(r, s) with f = g = lda preference; same-side pairs never appear.
    Utilities are computed one suitor row at a time and filtered before the next.
    """
    caps = caps or Capacities()
    candidate_filter = candidate_filter or CandidateFilter()
    if plan is not None and FeatureSpace(plan).fingerprint != model.space.fingerprint:
        raise DataError('model was trained on a different feature space than the given plan')
    encoder = PairEncoder(users, model.plan, model.space)
    rows = {g: np.flatnonzero(encoder.gender == g) for g in GENDERS}
    active = [g for g in GENDERS if len(rows[g]) and len(rows[opposite(g)])]
    weights = {g: type_weight_matrix(model, encoder, rows[g]) for g in active}

    s_parts, r_parts, u_parts = [], [], []
    for g in active:
        suitors, receivers = rows[g], rows[opposite(g)]
        phi, phi_back = model.side(g).phi, model.side(opposite(g)).phi
        w_back = weights[opposite(g)]
        receiver_ids = [encoder.user_ids[r] for r in receivers]
        for i, s in enumerate(suitors):
            forward = weights[g][i] @ phi[:, encoder.ids(s, receivers)]
            back = np.einsum('rt,tr->r', w_back, phi_back[:, encoder.ids_seen_by(s, receivers)])
            u = forward * back
            keep = candidate_filter.select(encoder.user_ids[s], receiver_ids, u)
            s_parts.append(np.full(len(keep), s, dtype=int))
            r_parts.append(receivers[keep])
            u_parts.append(u[keep])

    def concat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    instance = MarketInstance(
        user_ids=encoder.user_ids,
        s_idx=concat(s_parts, int),
        r_idx=concat(r_parts, int),
        u=np.clip(concat(u_parts, float), 0.0, 1.0),
        C_S=[caps.send(u) for u in encoder.user_ids],
        C_R=[caps.recv(u) for u in encoder.user_ids],
    )
    logger.info('market of %d users and %d candidate pairs', len(instance.user_ids), instance.n_pairs)
    return instance


class FlowNetwork(object):
    """
    Residual graph for Dinic's algorithm (shortest augmenting paths by arc count).
    Arc e and its reverse are stored as e and e ^ 1; the flow on e is the residual of e ^ 1.
    """

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self.adjacent: List[List[int]] = [[] for _ in range(n_nodes)]
        self.head: List[int] = []
        self.residual: List[float] = []

    def add_edge(self, tail: int, head: int, capacity: float) -> int:
        e = len(self.head)
        self.head += [head, tail]
        self.residual += [float(capacity), 0.0]
        self.adjacent[tail].append(e)
        self.adjacent[head].append(e + 1)
        return e

    def flow(self, e: int) -> float:
        return self.residual[e ^ 1]

    def _levels(self, source: int) -> List[int]:
        level = [-1] * self.n_nodes
        level[source] = 0
        queue = deque([source])
        while queue:
            v = queue.popleft()
            for e in self.adjacent[v]:
                w = self.head[e]
                if level[w] < 0 and self.residual[e] > FLOW_EPS:
                    level[w] = level[v] + 1
                    queue.append(w)
        return level

    def _augment(self, source: int, sink: int, level: List[int], cursor: List[int]) -> float:
        path: List[int] = []
        v = source
        while True:
            if v == sink:
                pushed = min(self.residual[e] for e in path)
                for e in path:
                    self.residual[e] -= pushed
                    self.residual[e ^ 1] += pushed
                return pushed
            edges = self.adjacent[v]
            while cursor[v] < len(edges):
                e = edges[cursor[v]]
                w = self.head[e]
                if self.residual[e] > FLOW_EPS and level[w] == level[v] + 1:
                    break
                cursor[v] += 1
            if cursor[v] < len(edges):
                path.append(edges[cursor[v]])
                v = self.head[edges[cursor[v]]]
                continue
            # dead end
            if v == source:
                return 0.0
            level[v] = -1
            e = path.pop()
            v = self.head[e ^ 1]
            cursor[v] += 1

    def max_flow(self, source: int, sink: int) -> float:
        total = 0.0
        while True:
            level = self._levels(source)
            if level[sink] < 0:
                return total
            cursor = [0] * self.n_nodes
            while True:
                pushed = self._augment(source, sink, level, cursor)
                if pushed <= FLOW_EPS:
                    break
                total += pushed


class Recommendation(NamedTuple):
    partner_id: str
    score: float


@dataclass
class MatchingPlan:
    user_ids: List[str]
    s_idx: np.ndarray
    r_idx: np.ndarray
    u: np.ndarray
    x: np.ndarray
    objective: float

    def _loads(self, idx) -> np.ndarray:
        return np.bincount(idx, weights=self.u * self.x, minlength=len(self.user_ids))

    @property
    def send_load(self) -> np.ndarray:
        return self._loads(self.s_idx)

    @property
    def recv_load(self) -> np.ndarray:
        return self._loads(self.r_idx)

    def to_dict(self):
        nonzero = np.flatnonzero(self.x > 0)
        send, recv = self.send_load, self.recv_load
        return {
            'objective': self.objective,
            'pairs': [
                {'s': self.user_ids[self.s_idx[i]], 'r': self.user_ids[self.r_idx[i]],
                 'u': self.u[i], 'x': self.x[i]}
                for i in nonzero
            ],
            'loads': {u: {'send': send[i], 'recv': recv[i]} for i, u in enumerate(self.user_ids)},
        }

    @classmethod
    def from_dict(cls, d) -> 'MatchingPlan':
        user_ids = list(d['loads'])
        index = {u: i for i, u in enumerate(user_ids)}
        pairs = d['pairs']
        return cls(
            user_ids=user_ids,
            s_idx=np.array([index[p['s']] for p in pairs], dtype=int),
            r_idx=np.array([index[p['r']] for p in pairs], dtype=int),
            u=np.array([p['u'] for p in pairs], dtype=float),
            x=np.array([p['x'] for p in pairs], dtype=float),
            objective=float(d['objective']),
        )

    def save(self, path: str, config: Optional[dict] = None):
        d = self.to_dict()
        if config is not None:
            d['config'] = config
        write_json(path, d)

    @classmethod
    def load(cls, path: str) -> 'MatchingPlan':
        return cls.from_dict(read_json(path))


def solve_max_utility(instance: MarketInstance) -> MatchingPlan:
    n = len(instance.user_ids)
    source, sink = 2 * n, 2 * n + 1
    net = FlowNetwork(2 * n + 2)
    for i in np.unique(instance.s_idx):
        net.add_edge(source, int(i), instance.C_S[i])
    pair_edges = [
        net.add_edge(int(s), n + int(r), u)
        for s, r, u in zip(instance.s_idx, instance.r_idx, instance.u)
    ]
    for i in np.unique(instance.r_idx):
        net.add_edge(n + int(i), sink, instance.C_R[i])

    value = net.max_flow(source, sink)
    y = np.array([net.flow(e) for e in pair_edges], dtype=float)
    x = np.zeros(instance.n_pairs)
    positive = instance.u > 0
    x[positive] = np.clip(y[positive] / instance.u[positive], 0.0, 1.0)
    objective = float(np.dot(instance.u, x))
    logger.info('max flow %.6f over %d pairs', value, instance.n_pairs)
    return MatchingPlan(instance.user_ids, instance.s_idx.copy(), instance.r_idx.copy(),
                        instance.u.copy(), x, objective)


def lp_oracle(instance: MarketInstance) -> float:
    """
    Optimum of the program by enumerating its dual vertices, which are the cuts of the
    flow network: for a set A of suitors kept on the source side the best cut costs
    sum_{s not in A} C_S(s) + sum_r min(C_R(r), sum_{s in A} u_sr). Small instances only.
    """
    if instance.n_pairs > ORACLE_MAX_PAIRS:
        raise DataError(f'lp_oracle handles at most {ORACLE_MAX_PAIRS} pairs, got {instance.n_pairs}')
    if instance.n_pairs == 0:
        return 0.0
    suitors = sorted(set(instance.s_idx.tolist()))
    receivers = sorted(set(instance.r_idx.tolist()))
    U = np.zeros((len(instance.user_ids), len(instance.user_ids)))
    np.add.at(U, (instance.s_idx, instance.r_idx), instance.u)

    if len(suitors) <= len(receivers):
        side, other = suitors, receivers
        side_cap, other_cap = instance.C_S, instance.C_R
        weights = U
    else:
        side, other = receivers, suitors
        side_cap, other_cap = instance.C_R, instance.C_S
        weights = U.T

    best = np.inf
    for mask in itertools.product((False, True), repeat=len(side)):
        kept = [v for v, m in zip(side, mask) if m]
        cost = sum(side_cap[v] for v, m in zip(side, mask) if not m)
        for w in other:
            cost += min(other_cap[w], sum(weights[v, w] for v in kept))
        best = min(best, cost)
    return float(best)


def extract_recommendations(plan: MatchingPlan, mode: str = 'deterministic',
                            seed: Optional[int] = None) -> Dict[str, List[Recommendation]]:
    """
    Ranked recommendation list per suitor (every user gets an entry, possibly empty).
    deterministic keeps pairs with x >= 0.5; sampled keeps each pair with probability x.
    Ranked by u * x, ties by partner id.
    """
    if mode not in MODES:
        raise DataError(f'mode should be one of {MODES}, got {mode!r}')
    if mode == 'sampled':
        rng = substream(seed, 'recommend')
        chosen = rng.random(len(plan.x)) < plan.x
    else:
        chosen = plan.x >= 0.5

    recs: Dict[str, List[Recommendation]] = {u: [] for u in plan.user_ids}
    for i in np.flatnonzero(chosen):
        suitor = plan.user_ids[plan.s_idx[i]]
        recs[suitor].append(Recommendation(plan.user_ids[plan.r_idx[i]], float(plan.u[i] * plan.x[i])))
    for suitor in recs:
        recs[suitor].sort(key=lambda rec: (-rec.score, rec.partner_id))
    return recs


def save_recommendations(path: str, recs: Mapping[str, Sequence[Recommendation]]):
    write_jsonl(path, (
        {'user_id': user_id, 'recs': [{'partner_id': r.partner_id, 'score': r.score} for r in lst]}
        for user_id, lst in recs.items()
    ))


@dataclass
class PlanReport:
    send_slack: Dict[str, float]
    recv_slack: Dict[str, float]
    violations: List[Dict[str, object]]
    objective: float
    recomputed_objective: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_for_violations(self):
        if self.violations:
            first = self.violations[0]
            raise PlanViolationError(
                f'{len(self.violations)} constraint violation(s), first: {first["constraint"]} '
                f'at {first["where"]} by {first["amount"]:.3g}'
            )


def verify_plan(plan: MatchingPlan, instance: MarketInstance, tolerance: float = PLAN_TOLERANCE) -> PlanReport:
    """Checks every constraint of the program against the instance; violations are collected, not raised."""
    violations = []
    pair_of = {
        (instance.user_ids[s], instance.user_ids[r]): i
        for i, (s, r) in enumerate(zip(instance.s_idx, instance.r_idx))
    }
    x = np.zeros(instance.n_pairs)
    for s, r, value in zip(plan.s_idx, plan.r_idx, plan.x):
        key = (plan.user_ids[s], plan.user_ids[r])
        i = pair_of.get(key)
        if i is None:
            if value > 0:
                violations.append({'constraint': 'unknown_pair', 'where': key, 'amount': float(value)})
            continue
        x[i] = value

    for i in np.flatnonzero((x < -tolerance) | (x > 1 + tolerance)):
        amount = -x[i] if x[i] < 0 else x[i] - 1
        violations.append({'constraint': 'x_bounds', 'where': (instance.user_ids[instance.s_idx[i]],
                                                               instance.user_ids[instance.r_idx[i]]),
                           'amount': float(amount)})
    for i in np.flatnonzero((instance.u == 0) & (x > tolerance)):
        violations.append({'constraint': 'zero_utility', 'where': (instance.user_ids[instance.s_idx[i]],
                                                                   instance.user_ids[instance.r_idx[i]]),
                           'amount': float(x[i])})

    weighted = instance.u * x
    n = len(instance.user_ids)
    send = instance.C_S - np.bincount(instance.s_idx, weights=weighted, minlength=n)
    recv = instance.C_R - np.bincount(instance.r_idx, weights=weighted, minlength=n)
    for name, slack in (('send_capacity', send), ('recv_capacity', recv)):
        for i in np.flatnonzero(slack < -tolerance):
            violations.append({'constraint': name, 'where': instance.user_ids[i], 'amount': float(-slack[i])})

    recomputed = float(np.dot(instance.u, x))
    if abs(recomputed - plan.objective) > 1e-12 * max(1.0, abs(recomputed)):
        violations.append({'constraint': 'objective', 'where': 'plan',
                           'amount': abs(recomputed - plan.objective)})
    if violations:
        logger.warning('plan verification found %d violation(s)', len(violations))
    return PlanReport(
        send_slack={u: float(send[i]) for i, u in enumerate(instance.user_ids)},
        recv_slack={u: float(recv[i]) for i, u in enumerate(instance.user_ids)},
        violations=violations,
        objective=plan.objective,
        recomputed_objective=recomputed,
    )
