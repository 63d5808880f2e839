"""Counter-based random streams: reproducible and order-independent.

Every draw is a pure function of (seed, key fields, counter), so renders can
be tiled across any number of workers without changing a single sample. The
mixer is the splitmix64 finalizer; sequences are its keyed counter stream.
"""

from __future__ import annotations

import numpy as np

__all__ = ["mix64", "fold_key", "stream_uniform", "RngStream"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INIT = np.uint64(0x243F6A8885A308D3)
_INV_2_53 = float(2.0**-53)


def _as_u64(x) -> np.ndarray:
    # int64 round trip keeps negative python ints well-defined (two's complement)
    return np.asarray(x).astype(np.int64).astype(np.uint64)


def mix64(x) -> np.ndarray:
    """splitmix64 finalizer: bijective avalanche mix of uint64 values."""
    x = np.asarray(x, dtype=np.uint64).copy()
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def fold_key(*fields) -> np.ndarray:
    """Hash integer fields (scalars or broadcastable arrays) into a uint64 key."""
    h = np.broadcast_to(_INIT, np.broadcast_shapes(*(np.shape(f) for f in fields))).copy()
    for f in fields:
        h = mix64((h + _GAMMA) ^ _as_u64(f))
    return h


def _to_unit(bits: np.ndarray) -> np.ndarray:
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53


def stream_uniform(key, n: int, start: int = 0) -> np.ndarray:
    """Draws start..start+n-1 of the uniform(0,1) stream for each key.

    key: uint64 array of shape (...); returns float64 of shape (..., n).
    """
    key = np.asarray(key, dtype=np.uint64)
    idx = (np.uint64(start) + np.arange(n, dtype=np.uint64)) * _GAMMA
    return _to_unit(mix64(key[..., None] + idx))


class RngStream:
    """Value-like random stream identified by a seed plus integer key fields.

    Identical (seed, key) always yields the identical sequence. `derive`
    produces an independent child stream; instances are cheap to copy.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._base = fold_key(self.seed, *self.key)
        self._counter = 0

    def derive(self, *fields: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(f) for f in fields))

    def copy(self) -> "RngStream":
        child = RngStream(self.seed, self.key)
        child._counter = self._counter
        return child

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = stream_uniform(self._base, n, start=self._counter)
        self._counter += n
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = stream_uniform(self._base, 2 * n, start=self._counter)
        self._counter += 2 * n
        r = np.sqrt(-2.0 * np.log1p(-u[:n]))
        z = r * np.cos(2.0 * np.pi * u[n:])
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, high: int, shape=()) -> np.ndarray:
        u = self.uniform(shape if shape else (1,))
        out = np.minimum((u * high).astype(np.int64), high - 1)
        return out.reshape(shape) if shape else int(out[0])

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key}, counter={self._counter})"
