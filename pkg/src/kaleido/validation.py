"""Input validation and seeding helpers.

Everything numeric in this package runs in float64; `as_float_array`
normalizes inputs once at the public boundary so the internals never
have to re-check dtypes. Seed handling goes through `substream` so that
every consumer of randomness owns a named, collision-free stream derived
from one master seed.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib

import numpy as np

from .errors import ContractError, NonFiniteError


def as_float_array(x, name: str = "array", ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray, optionally enforcing dimensionality."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def check_shape(arr: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    if arr.shape != shape:
        raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ContractError(f"{name} must be > 0, got {value}")
    return value


def substream(master_seed: int, *path) -> np.random.Generator:
    """Derive an independent named RNG stream from one master seed.

    Path components may be ints or strings; strings are hashed with
    crc32, which is stable across platforms and Python versions (unlike
    the builtin ``hash``). Identical (seed, path) pairs always yield the
    same stream.
    """
    key = [int(master_seed) & 0xFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf8")))
        else:
            key.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))


def atomic_write_text(path: str, text: str) -> None:
    """Write a file via temp-then-rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
