import hashlib
import json
import os
import zlib
from typing import Any, Iterator, Tuple

import numpy as np

from .errors import DataError


def substream(seed: int, *names) -> np.random.Generator:
    """
    Independent generator for a named component, e.g. substream(7, 'messages', 'M00012').
    The same (seed, names) always yields the same stream, whatever else ran before.
    """
    if seed is None:
        raise DataError('a seed is required for stochastic operations')
    keys = [zlib.crc32(str(name).encode('utf-8')) for name in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f'object of type {type(obj).__name__} is not JSON serializable')


def dumps(obj: Any, indent=None) -> str:
    return json.dumps(obj, sort_keys=True, indent=indent, default=_to_builtin)


def write_json(path: str, obj: Any):
    ensure_parent(path)
    with open(path, 'w') as f:
        f.write(dumps(obj, indent=1))
        f.write('\n')


def read_json(path: str):
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f'{path}: file not found')
    except json.JSONDecodeError as e:
        raise DataError(f'{path}: malformed JSON ({e})')


def write_jsonl(path: str, rows):
    ensure_parent(path)
    with open(path, 'w') as f:
        for row in rows:
            f.write(dumps(row))
            f.write('\n')


def read_jsonl(path: str) -> Iterator[Tuple[int, dict]]:
    """Yields (line number, object) for every non-blank line."""
    if not os.path.exists(path):
        raise DataError(f'{path}: file not found')
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f'{path}:{lineno}: malformed line ({e.msg})')
            if not isinstance(obj, dict):
                raise DataError(f'{path}:{lineno}: expected a JSON object')
            yield lineno, obj


def ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            h.update(chunk)
    return h.hexdigest()


def text_digest(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:length]
