import json
import os
from typing import Any, Dict, Mapping, Optional

import yaml

from .errors import ConfigError


class DotDict(dict):
    """
    A dict with dot access whose dotted keys nest: d['lda.T'] = 8 stores {'lda': {'T': 8}},
    readable back as d.lda.T or d['lda.T'].
    """

    def __init__(self, *a, **kw):
        dict.__init__(self)
        self.update(*a, **kw)

    @staticmethod
    def _split(key):
        head, _, rest = str(key).partition('.')
        if head in dict.__dict__:
            raise AttributeError('This key is reserved for the dict methods.')
        return head, rest

    def __getattr__(self, key):
        try:
            return dict.__getitem__(self, key)
        except KeyError:
            raise AttributeError(key)

    def __setattr__(self, key, value):
        self[key] = value

    def __getitem__(self, key):
        head, rest = self._split(key)
        value = dict.__getitem__(self, head)
        if not rest:
            return value
        if not isinstance(value, DotDict):
            raise KeyError(key)
        return value[rest]

    def __setitem__(self, key, value):
        head, rest = self._split(key)
        if rest:
            child = dict.get(self, head)
            if not isinstance(child, DotDict):
                child = DotDict()
                dict.__setitem__(self, head, child)
            child[rest] = value
        elif isinstance(value, dict) and not isinstance(value, DotDict):
            dict.__setitem__(self, head, DotDict(value))
        else:
            dict.__setitem__(self, head, value)

    def __contains__(self, key):
        try:
            self[key]
        except (KeyError, AttributeError):
            return False
        return True

    def update(self, *args, **kwargs):
        for k, v in dict(*args, **kwargs).items():
            self[k] = v

    def flatten(self, prefix: str = '') -> Dict[str, Any]:
        """The dotted-key view: {'lda.T': 8, ...}."""
        out = {}
        for k, v in self.items():
            if isinstance(v, DotDict):
                out.update(v.flatten(f'{prefix}{k}.'))
            else:
                out[prefix + k] = v
        return out

    def __getstate__(self):
        return dict(self)

    def __setstate__(self, state):
        self.update(state)


DEFAULT_FILENAMES = {
    'users': 'users.jsonl',
    'messages': 'messages.jsonl',
    'plan': 'plan.json',
    'model': 'model.json',
    'truth': 'truth.json',
    'feature_report': 'feature_report.json',
    'matching_plan': 'matching_plan.json',
    'recommendations': 'recommendations.jsonl',
    'report': 'report.json',
}


class RunConfig(object):
    """
    Dotted-key configuration ('lda.T', 'market.send_capacity', ...) with a default for
    every key, kept as a DotDict tree. Sections are readable as attributes: cfg.lda.T == cfg['lda.T'].
    """
    DEFAULTS = {
        'seed': None,
        'paths.out': 'out',
        'paths.users': None,
        'paths.messages': None,
        'paths.plan': None,
        'paths.model': None,
        'paths.truth': None,
        'paths.feature_report': None,
        'paths.matching_plan': None,
        'paths.recommendations': None,
        'paths.report': None,
        'paths.marginals': None,
        'paths.capacities': None,

        'sim.users_per_gender': 20000,
        'sim.types_per_gender': 4,
        'sim.recommendations_per_user': 100,
        'sim.k_max': 10,
        'sim.favorite_fraction': 0.05,
        'sim.favorite_weight_low': 300.0,
        'sim.favorite_weight_high': 500.0,
        'sim.other_weight_low': 1.0,
        'sim.other_weight_high': 2.0,
        'sim.target_reply_rate': 0.17,
        'sim.cities': 1,
        'sim.dedupe_repeats': False,
        'sim.type_assignment': 'uniform',
        'sim.emit_reply_events': True,
        'sim.replies': True,
        'sim.export_candidates': True,

        'discretize.significance': 0.05,
        'discretize.max_intervals': 16,
        'discretize.income_dif_absolute': False,

        'select.score_floor': 'mean',
        'select.conditional_entropy_threshold': 0.05,
        'select.mutual_information_ratio': 0.9,

        'lda.T': 10,
        'lda.alpha': 50.0,
        'lda.beta': None,
        'lda.burn_in': 500,
        'lda.n_samples': 100,
        'lda.thin': 5,

        'market.send_capacity': 10.0,
        'market.recv_capacity': 20.0,
        'market.utility_floor': 1e-6,
        'market.top_k': 100,
        'market.mode': 'deterministic',

        'evaluate.folds': 10,
        'evaluate.policies': ['random', 'suitor', 'two_sided'],
    }

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        object.__setattr__(self, '_tree', DotDict(self.DEFAULTS))
        # nested mappings ({"lda": {"T": 8}}) and dotted keys ({"lda.T": 8}) are equivalent
        try:
            values = DotDict(values or {}).flatten()
        except AttributeError as e:
            raise ConfigError(f'invalid config key: {e}')
        for key, value in values.items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        if not os.path.exists(path):
            raise ConfigError(f'config file {path} does not exist')
        with open(path, 'r') as f:
            text = f.read()
        try:
            if path.endswith(('.yml', '.yaml')):
                values = yaml.load(text, yaml.SafeLoader)
            else:
                values = json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f'unable to parse config file {path}: {e}')
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ConfigError(f'config file {path} should hold a single object of dotted keys')
        return cls(values)

    def _coerce(self, key, value):
        default = self.DEFAULTS[key]
        if value is None or default is None:
            return value
        try:
            if isinstance(default, bool):
                if isinstance(value, str):
                    if value.lower() not in ('true', 'false'):
                        raise ValueError(value)
                    return value.lower() == 'true'
                return bool(value)
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                if isinstance(value, str):
                    return [v.strip() for v in value.split(',') if v.strip()]
                return list(value)
        except (TypeError, ValueError):
            raise ConfigError(f'invalid value {value!r} for {key} (expected {type(default).__name__})')
        return value

    def set(self, key: str, value: Any):
        if key not in self.DEFAULTS:
            raise ConfigError(f'unknown config key {key}')
        self._tree[key] = self._coerce(key, value)
        return self

    def override(self, assignment: str):
        """Applies a command-line 'key=value' override; value parsed as a JSON literal if possible."""
        if '=' not in assignment:
            raise ConfigError(f'override {assignment!r} should look like key=value')
        key, raw = assignment.split('=', 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        return self.set(key.strip(), value)

    def __getitem__(self, key):
        if key not in self.DEFAULTS:
            raise KeyError(key)
        return self._tree[key]

    def __contains__(self, key):
        return key in self.DEFAULTS

    def section(self, name: str) -> DotDict:
        """A detached copy of one section, e.g. section('lda').T."""
        return DotDict(self._tree[name].flatten())

    def __getattr__(self, item):
        tree = object.__getattribute__(self, '_tree')
        if item in tree:
            value = tree[item]
            return self.section(item) if isinstance(value, DotDict) else value
        raise AttributeError('config has no key or section %s' % item)

    def __setattr__(self, key, value):
        self.set(key, value)

    def path(self, name: str) -> str:
        """Explicit paths.<name>, else <paths.out>/<default file name>."""
        explicit = self._tree.paths.get(name)
        if explicit is not None:
            return explicit
        return os.path.join(self._tree['paths.out'], DEFAULT_FILENAMES[name])

    def require_seed(self) -> int:
        if self._tree.seed is None:
            raise ConfigError('this command is stochastic; pass --seed or set "seed" in the config')
        return self._tree.seed

    def to_dict(self) -> Dict[str, Any]:
        return self._tree.flatten()
