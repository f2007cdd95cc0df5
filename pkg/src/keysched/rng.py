"""Counter-based pseudo-random values.

Every draw is a pure function of an integer key tuple, so a value can be
regenerated on demand without storing it and without caring about query
order. The mixing function is the SplitMix64 finalizer; uniforms take the
top 53 bits, normals come from Box-Muller over two uniforms.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_K_SALT = np.uint64(0xD1B54A32D192ED03)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return np.atleast_1d(arr)
    if arr.dtype.kind in "iu":
        return np.atleast_1d(arr.astype(np.int64).astype(np.uint64))
    return np.atleast_1d(np.asarray([int(v) & MASK64 for v in arr.ravel()], dtype=np.uint64).reshape(arr.shape))


def pair_key(seed, i, k) -> np.ndarray:
    """Hash (seed, i, k) to one uint64 per element; inputs broadcast."""
    s = _u64(seed)
    ii = _u64(i)
    kk = _u64(k)
    with np.errstate(over="ignore"):
        h = mix64(s)
        h = mix64(h ^ (ii * _GOLDEN))
        h = mix64(h ^ (kk * _K_SALT))
    return h


def uniforms(key: np.ndarray, counters: np.ndarray) -> np.ndarray:
    """Uniform (0, 1) values, shape key.shape + counters.shape."""
    key = np.asarray(key, dtype=np.uint64)[..., None]
    ctr = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = mix64(key + (ctr + np.uint64(1)) * _GOLDEN)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(key: np.ndarray, n: int) -> np.ndarray:
    """n standard normals per key, shape key.shape + (n,)."""
    c = np.arange(n, dtype=np.uint64) * np.uint64(2)
    u1 = uniforms(key, c)
    u2 = uniforms(key, c + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(*parts: int) -> int:
    """Combine integers into one 64-bit seed."""
    h = np.uint64(0)
    for p in parts:
        h = mix64(np.atleast_1d(h) ^ _u64(int(p) & MASK64))[0]
    return int(h)
