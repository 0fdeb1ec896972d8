"""
Latent user types learned from who writes to whom.

Each user d of one market side is a "document" whose tokens are the feature tuples of
the counterparts d wrote to (initiations and replies alike, since f and g are assumed
equal). A user has a single latent type z_d; the type proportions and the per-type
preference rows are integrated out and only z is resampled (collapsed Gibbs).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .domain import (
    GENDERS,
    DiscretizationPlan,
    FeatureSpace,
    MessageLog,
    PairEncoder,
    UserProfile,
    UserSet,
    pair_feature_tuple,
    profile_tuple,
)
from .errors import DataError, GibbsStateError
from .utils import read_json, substream, write_json

logger = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    T: int
    alpha: float
    m: np.ndarray
    beta: float
    n: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        if self.T < 1:
            raise DataError('T should be at least 1')
        if self.alpha <= 0 or self.beta <= 0:
            raise DataError('alpha and beta should be positive')
        if self.m.shape != (self.T,) or abs(self.m.sum() - 1) > 1e-9 or (self.m < 0).any():
            raise DataError('m should be a probability vector of length T')
        if abs(self.n.sum() - 1) > 1e-9 or (self.n < 0).any():
            raise DataError('n should be a probability vector over the feature tuples')

    @classmethod
    def defaults(cls, T: int, n_tuples: int, alpha: float = 50.0, beta: Optional[float] = None) -> 'Hyperparams':
        """Symmetric base measures; beta defaults to 0.1 per feature tuple."""
        if beta is None:
            beta = 0.1 * n_tuples
        return cls(T=T, alpha=alpha, m=np.full(T, 1.0 / T), beta=beta, n=np.full(n_tuples, 1.0 / n_tuples))

    @property
    def n_tuples(self) -> int:
        return len(self.n)

    def to_dict(self):
        return {'T': self.T, 'alpha': self.alpha, 'm': self.m, 'beta': self.beta, 'n': self.n}

    @classmethod
    def from_dict(cls, d) -> 'Hyperparams':
        return cls(T=d['T'], alpha=d['alpha'], m=d['m'], beta=d['beta'], n=d['n'])


@dataclass
class Schedule:
    burn_in: int = 500
    n_samples: int = 100
    thin: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise DataError('the sampling schedule should retain at least one sample')
        if self.burn_in < 0 or self.thin < 1:
            raise DataError('burn_in should be >= 0 and thin >= 1')


class Corpus(object):
    """Token counts per user of one side: docs[d] = (tuple ids, counts)."""

    def __init__(self, user_ids: Sequence[str], tokens: Sequence[np.ndarray], n_tuples: int):
        self.user_ids = list(user_ids)
        self.n_tuples = n_tuples
        self.docs = []
        for t in tokens:
            ids, counts = np.unique(np.asarray(t, dtype=int), return_counts=True)
            self.docs.append((ids, counts))
        self.lengths = np.array([int(c.sum()) for _, c in self.docs], dtype=int)

    def __len__(self):
        return len(self.user_ids)

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def build_corpus(log: MessageLog, users: UserSet, plan: DiscretizationPlan, gender: str,
                 encoder: Optional[PairEncoder] = None) -> Corpus:
    """Users of one gender with at least one sent message, in user-set order."""
    encoder = encoder or PairEncoder(users, plan)
    user_ids, tokens = [], []
    for u in users.by_gender(gender):
        contacts = log.contacts(u.user_id)
        if not contacts:
            continue
        user_ids.append(u.user_id)
        tokens.append(encoder.ids(encoder.row[u.user_id], encoder.rows_of(contacts)))
    return Corpus(user_ids, tokens, encoder.space.size)


@dataclass
class GibbsState:
    z: np.ndarray
    N_vt: np.ndarray
    N_t: np.ndarray
    D_t: np.ndarray
    rng: np.random.Generator
    corpus: Corpus
    removed: Optional[int] = None

    @property
    def T(self) -> int:
        return self.N_vt.shape[1]

    @property
    def D(self) -> int:
        return len(self.corpus)

    def remove(self, d: int):
        if self.removed is not None:
            raise GibbsStateError(f'user {self.removed} is already out of the counts')
        ids, counts = self.corpus.docs[d]
        t = self.z[d]
        self.N_vt[ids, t] -= counts
        self.N_t[t] -= self.corpus.lengths[d]
        self.D_t[t] -= 1
        self.removed = d

    def insert(self, d: int, t: int):
        if self.removed != d:
            raise GibbsStateError(f'user {d} is not out of the counts')
        ids, counts = self.corpus.docs[d]
        self.N_vt[ids, t] += counts
        self.N_t[t] += self.corpus.lengths[d]
        self.D_t[t] += 1
        self.z[d] = t
        self.removed = None

    def check(self):
        if not np.array_equal(self.N_t, self.N_vt.sum(axis=0)):
            raise GibbsStateError('N_t differs from the column sums of N_vt')
        expected_users = self.D - (self.removed is not None)
        if self.D_t.sum() != expected_users:
            raise GibbsStateError('type user counts do not add up to the user count')
        if (self.N_vt < 0).any() or (self.D_t < 0).any():
            raise GibbsStateError('negative counts')

    def snapshot(self):
        return self.z.copy(), self.N_vt.copy(), self.N_t.copy(), self.D_t.copy()


def init_state(corpus: Corpus, hp: Hyperparams, seed: int) -> GibbsState:
    if len(corpus) == 0:
        raise DataError('cannot train on an empty corpus')
    if corpus.n_tuples != hp.n_tuples:
        raise DataError('corpus and hyperparameters disagree on the number of feature tuples')
    rng = np.random.default_rng(seed)
    z = rng.integers(0, hp.T, size=len(corpus))
    N_vt = np.zeros((corpus.n_tuples, hp.T), dtype=np.int64)
    for d, (ids, counts) in enumerate(corpus.docs):
        N_vt[ids, z[d]] += counts
    N_t = N_vt.sum(axis=0)
    D_t = np.bincount(z, minlength=hp.T).astype(np.int64)
    return GibbsState(z=z, N_vt=N_vt, N_t=N_t, D_t=D_t, rng=rng, corpus=corpus)


def gibbs_log_conditional(state: GibbsState, d: int, hp: Hyperparams) -> np.ndarray:
    if state.removed != d:
        raise GibbsStateError(f'conditional of user {d} needs the state without that user')
    ids, counts = state.corpus.docs[d]
    k_d = state.corpus.lengths[d]
    bn = hp.beta * hp.n[ids][:, None]
    N = state.N_vt[ids, :]
    log_score = (
        gammaln(state.N_t + hp.beta) - gammaln(state.N_t + k_d + hp.beta)
        + (gammaln(N + counts[:, None] + bn) - gammaln(N + bn)).sum(axis=0)
        + np.log(state.D_t + hp.alpha * hp.m) - np.log(state.D - 1 + hp.alpha)
    )
    return log_score


def gibbs_conditional(state: GibbsState, d: int, hp: Hyperparams) -> np.ndarray:
    """Unnormalized scores over types for user d (scaled so the largest is 1)."""
    log_score = gibbs_log_conditional(state, d, hp)
    return np.exp(log_score - log_score.max())


def gibbs_sweep(state: GibbsState, hp: Hyperparams) -> GibbsState:
    for d in range(state.D):
        state.remove(d)
        scores = gibbs_conditional(state, d, hp)
        cdf = np.cumsum(scores)
        t = int(np.searchsorted(cdf, state.rng.random() * cdf[-1], side='right'))
        state.insert(d, min(t, state.T - 1))
    return state


def log_joint(state: GibbsState, hp: Hyperparams) -> float:
    """log P(Data, z) with the type proportions and preference rows integrated out."""
    bn = hp.beta * hp.n[:, None]
    tokens = (
        hp.T * gammaln(hp.beta) - gammaln(state.N_t + hp.beta).sum()
        + (gammaln(state.N_vt + bn) - gammaln(bn)).sum()
    )
    am = hp.alpha * hp.m
    types = (
        gammaln(hp.alpha) - gammaln(state.D_t.sum() + hp.alpha)
        + (gammaln(state.D_t + am) - gammaln(am)).sum()
    )
    return float(tokens + types)


def estimate_phi(state: GibbsState, hp: Hyperparams) -> np.ndarray:
    """T x |V| preference matrix, row t = (beta n_v + N_v|t) / (beta + N_t)."""
    return (hp.beta * hp.n[None, :] + state.N_vt.T) / (hp.beta + state.N_t)[:, None]


def type_prior_predictive(D_t: Sequence[float], hp: Hyperparams) -> np.ndarray:
    D_t = np.asarray(D_t, dtype=float)
    return (D_t + hp.alpha * hp.m) / (D_t.sum() + hp.alpha)


def align_rows(phi: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """
    Greedy label alignment: perm[i] is the reference row matched to row i, taking the
    closest (L1) unmatched pair first.
    """
    T = phi.shape[0]
    cost = np.abs(phi[:, None, :] - reference[None, :, :]).sum(axis=2)
    perm = np.full(T, -1, dtype=int)
    taken = np.zeros(T, dtype=bool)
    for flat in np.argsort(cost, axis=None, kind='stable'):
        i, j = divmod(int(flat), T)
        if perm[i] < 0 and not taken[j]:
            perm[i] = j
            taken[j] = True
    return perm


@dataclass
class SideModel:
    """What was learned for the users of one gender."""
    phi: np.ndarray
    user_ids: List[str]
    mu: np.ndarray
    q: Dict[int, np.ndarray]
    q_prior: np.ndarray
    type_counts: np.ndarray
    log_joint_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.user_ids)}

    @property
    def hard_labels(self) -> Dict[str, int]:
        return {u: int(np.argmax(self.mu[i])) for i, u in enumerate(self.user_ids)}

    def to_dict(self):
        return {
            'phi': self.phi,
            'users': self.user_ids,
            'mu': self.mu,
            'q': {str(k): v for k, v in sorted(self.q.items())},
            'q_prior': self.q_prior,
            'type_counts': self.type_counts,
            'log_joint_trace': self.log_joint_trace,
        }

    @classmethod
    def from_dict(cls, d) -> 'SideModel':
        T = len(d['q_prior'])
        return cls(
            phi=np.asarray(d['phi'], dtype=float),
            user_ids=list(d['users']),
            mu=np.asarray(d['mu'], dtype=float).reshape(-1, T),
            q={int(k): np.asarray(v, dtype=float) for k, v in d['q'].items()},
            q_prior=np.asarray(d['q_prior'], dtype=float),
            type_counts=np.asarray(d['type_counts'], dtype=np.int64),
            log_joint_trace=list(d['log_joint_trace']),
        )


class TrainedModel(object):
    def __init__(self, hyperparams: Hyperparams, plan: DiscretizationPlan, sides: Dict[str, SideModel]):
        self.hyperparams = hyperparams
        self.plan = plan
        self.space = FeatureSpace(plan)
        self.sides = sides
        if hyperparams.n_tuples != self.space.size:
            raise DataError('model hyperparameters do not match the feature space of its plan')

    def side(self, gender: str) -> SideModel:
        try:
            return self.sides[gender]
        except KeyError:
            raise DataError(f'model has no preferences for gender {gender}')

    def type_weights(self, user: UserProfile) -> np.ndarray:
        """mu of a training user; otherwise q of the user's profile tuple."""
        side = self.side(user.gender)
        i = side.index.get(user.user_id)
        if i is not None:
            return side.mu[i]
        return side.q.get(self.space.id_of(profile_tuple(user, self.plan)), side.q_prior)

    def to_dict(self):
        return {
            'hyperparams': self.hyperparams.to_dict(),
            'plan': self.plan.to_dict(),
            'feature_space_hash': self.space.fingerprint,
            'sides': {g: side.to_dict() for g, side in sorted(self.sides.items())},
        }

    def save(self, path: str, config: Optional[dict] = None):
        d = self.to_dict()
        if config is not None:
            d['config'] = config
        write_json(path, d)

    @classmethod
    def load(cls, path: str) -> 'TrainedModel':
        d = read_json(path)
        model = cls(
            Hyperparams.from_dict(d['hyperparams']),
            DiscretizationPlan.from_dict(d['plan']),
            {g: SideModel.from_dict(side) for g, side in d['sides'].items()},
        )
        if model.space.fingerprint != d.get('feature_space_hash'):
            raise DataError(f'{path}: feature space hash does not match the stored plan')
        return model


def profile_type_mle(labels: Dict[str, int], users: UserSet, plan: DiscretizationPlan,
                     hp: Hyperparams, space: Optional[FeatureSpace] = None):
    """
    q(v)_t = (#users with profile tuple v labelled t + alpha m_t) / (#users with tuple v + alpha).
    Returns the table for seen tuples and the prior predictive used for unseen ones.
    """
    space = space or FeatureSpace(plan)
    counts: Dict[int, np.ndarray] = {}
    type_counts = np.zeros(hp.T, dtype=np.int64)
    for user_id, t in labels.items():
        v = space.id_of(profile_tuple(users[user_id], plan))
        counts.setdefault(v, np.zeros(hp.T, dtype=np.int64))[t] += 1
        type_counts[t] += 1
    q = {v: (c + hp.alpha * hp.m) / (c.sum() + hp.alpha) for v, c in counts.items()}
    return q, type_prior_predictive(type_counts, hp), type_counts


def train_side(corpus: Corpus, hp: Hyperparams, schedule: Schedule, seed: int) -> SideModel:
    state = init_state(corpus, hp, seed)
    trace = []
    for sweep in range(schedule.burn_in):
        gibbs_sweep(state, hp)
        trace.append(log_joint(state, hp))
        if (sweep + 1) % 100 == 0:
            logger.info('burn-in sweep %d/%d, log-joint %.3f', sweep + 1, schedule.burn_in, trace[-1])

    samples_z, samples_phi, samples_lj = [], [], []
    for _ in range(schedule.n_samples):
        for _ in range(schedule.thin):
            gibbs_sweep(state, hp)
            trace.append(log_joint(state, hp))
        samples_z.append(state.z.copy())
        samples_phi.append(estimate_phi(state, hp))
        samples_lj.append(trace[-1])

    best = int(np.argmax(samples_lj))
    phi = samples_phi[best]
    mu = np.zeros((len(corpus), hp.T))
    rows = np.arange(len(corpus))
    for z, sample_phi in zip(samples_z, samples_phi):
        perm = align_rows(sample_phi, phi)
        mu[rows, perm[z]] += 1
    mu /= len(samples_z)
    logger.info('kept sample %d of %d (log-joint %.3f)', best, len(samples_z), samples_lj[best])
    return SideModel(
        phi=phi,
        user_ids=list(corpus.user_ids),
        mu=mu,
        q={},
        q_prior=type_prior_predictive(np.zeros(hp.T), hp),
        type_counts=np.zeros(hp.T, dtype=np.int64),
        log_joint_trace=trace,
    )


def train(log: MessageLog, users: UserSet, plan: DiscretizationPlan, hp: Hyperparams,
          schedule: Schedule) -> TrainedModel:
    """One chain per gender; each chain seeded from its own substream of schedule.seed."""
    encoder = PairEncoder(users, plan)
    sides = {}
    for gender in GENDERS:
        corpus = build_corpus(log, users, plan, gender, encoder)
        if len(corpus) == 0:
            logger.warning('no %s user sent a message; side left untrained', gender)
            continue
        logger.info('training %s side: %d users, %d tokens', gender, len(corpus), corpus.n_tokens)
        seed = int(substream(schedule.seed, 'lda', gender).integers(2 ** 63 - 1))
        side = train_side(corpus, hp, schedule, seed)
        q, q_prior, type_counts = profile_type_mle(side.hard_labels, users, plan, hp, encoder.space)
        side.q, side.q_prior, side.type_counts = q, q_prior, type_counts
        sides[gender] = side
    if not sides:
        raise DataError('cannot train on an empty corpus')
    return TrainedModel(hp, plan, sides)


def preference(model: TrainedModel, s: UserProfile, r: UserProfile) -> float:
    """Probability that s writes to r: sum_t weight_t(s) phi_{v_r|t}, zero for same-side pairs."""
    if s.gender == r.gender:
        return 0.0
    side = model.side(s.gender)
    v = model.space.id_of(pair_feature_tuple(s, r, model.plan))
    return float(model.type_weights(s) @ side.phi[:, v])


def type_weight_matrix(model: TrainedModel, encoder: PairEncoder, rows: Sequence[int]) -> np.ndarray:
    """type_weights of every listed user, one row each; all rows share a gender."""
    if len(rows) == 0:
        return np.zeros((0, model.hyperparams.T))
    return np.vstack([model.type_weights(encoder.profiles[r]) for r in rows])


def preference_matrix(model: TrainedModel, encoder: PairEncoder, suitors: Sequence[int],
                      receivers: Sequence[int]) -> np.ndarray:
    """preference for every (suitor row, receiver row) pair of one gender pairing."""
    receivers = np.asarray(receivers, dtype=int)
    out = np.zeros((len(suitors), len(receivers)))
    if len(suitors) == 0 or len(receivers) == 0:
        return out
    phi = model.side(encoder.gender[suitors[0]]).phi
    weights = type_weight_matrix(model, encoder, suitors)
    for i, s in enumerate(suitors):
        out[i] = weights[i] @ phi[:, encoder.ids(s, receivers)]
    return out
