import json
import os

import pytest

from matchlib.errors import ConfigError
from matchlib.run_config import DotDict, RunConfig


def test_defaults_and_sections():
    cfg = RunConfig()
    assert cfg['lda.T'] == 10
    assert cfg.lda.T == 10
    assert cfg.market.send_capacity == 10.0
    assert cfg.seed is None
    assert isinstance(cfg.sim, DotDict)


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match='lda.topics'):
        RunConfig({'lda.topics': 3})
    with pytest.raises(AttributeError):
        RunConfig().nonsense


@pytest.mark.parametrize('key, raw, expected', [
    ('lda.T', '8', 8),
    ('lda.alpha', '2.5', 2.5),
    ('sim.dedupe_repeats', 'true', True),
    ('evaluate.policies', 'random,suitor', ['random', 'suitor']),
    ('evaluate.policies', '["two_sided"]', ['two_sided']),
    ('market.top_k', 'null', None),
])
def test_overrides_are_coerced(key, raw, expected):
    cfg = RunConfig()
    cfg.override(f'{key}={raw}')
    assert cfg[key] == expected


@pytest.mark.parametrize('assignment', ['lda.T=2.5', 'sim.dedupe_repeats=maybe', 'lda.T'])
def test_bad_overrides(assignment):
    with pytest.raises(ConfigError):
        RunConfig().override(assignment)


def test_json_and_yaml_files(tmp_path):
    json_path = tmp_path / 'run.json'
    json_path.write_text(json.dumps({'seed': 4, 'lda.T': 6}))
    assert RunConfig.from_file(str(json_path)).lda.T == 6

    yaml_path = tmp_path / 'run.yml'
    yaml_path.write_text('seed: 4\nmarket.mode: sampled\n')
    cfg = RunConfig.from_file(str(yaml_path))
    assert cfg.market.mode == 'sampled'
    assert cfg.require_seed() == 4


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match='does not exist'):
        RunConfig.from_file(str(tmp_path / 'missing.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{"seed": ')
    with pytest.raises(ConfigError, match='unable to parse'):
        RunConfig.from_file(str(bad))
    listed = tmp_path / 'list.json'
    listed.write_text('[1, 2]')
    with pytest.raises(ConfigError, match='single object'):
        RunConfig.from_file(str(listed))


def test_paths_default_to_the_output_directory():
    cfg = RunConfig({'paths.out': 'results', 'paths.model': '/tmp/m.json'})
    assert cfg.path('users') == os.path.join('results', 'users.jsonl')
    assert cfg.path('model') == '/tmp/m.json'


def test_seed_is_required_for_stochastic_commands():
    with pytest.raises(ConfigError, match='--seed'):
        RunConfig().require_seed()


def test_to_dict_echoes_every_key():
    cfg = RunConfig({'seed': 1})
    d = cfg.to_dict()
    assert set(d) == set(RunConfig.DEFAULTS)
    assert d['seed'] == 1


def test_dot_dict_reserves_dict_methods():
    d = DotDict(a=1)
    assert d.a == 1
    with pytest.raises(AttributeError):
        d.items = 3


def test_dot_dict_nests_dotted_keys():
    d = DotDict({'lda.T': 8, 'lda.alpha': 2.0, 'seed': 1})
    assert d.lda.T == 8
    assert d['lda.alpha'] == 2.0
    assert d == {'lda': {'T': 8, 'alpha': 2.0}, 'seed': 1}
    assert 'lda.T' in d and 'lda.beta' not in d and 'seed.x' not in d
    assert d.flatten() == {'lda.T': 8, 'lda.alpha': 2.0, 'seed': 1}
    with pytest.raises(KeyError):
        d['seed.x']


def test_nested_config_files_match_dotted_ones(tmp_path):
    yaml_path = tmp_path / 'nested.yml'
    yaml_path.write_text('seed: 2\nlda:\n  T: 6\nmarket:\n  mode: sampled\n')
    nested = RunConfig.from_file(str(yaml_path))
    dotted = RunConfig({'seed': 2, 'lda.T': 6, 'market.mode': 'sampled'})
    assert nested.to_dict() == dotted.to_dict()
    with pytest.raises(ConfigError, match='lda.topics'):
        RunConfig({'lda': {'topics': 3}})


def test_sections_are_detached_copies():
    cfg = RunConfig()
    section = cfg.lda
    section.T = 99
    assert cfg.lda.T == 10
