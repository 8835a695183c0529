"""Counter-based random number generation.

Every draw is a pure function of (seed, stream path, counter position), so
generated data does not depend on call order, threading, or platform. Built
on the splitmix64 finalizer.
"""

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int, wrapped to 64 bits."""
    z &= _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return (z ^ (z >> 31)) & _M64


def _mix_array(z):
    # vectorized splitmix64 on a uint64 array (wraparound is intentional)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_key(seed: int, *path) -> int:
    """Derive a stream key from a seed and a path of ints or strings."""
    h = mix64(seed ^ _GOLDEN)
    for part in path:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = mix64(h ^ (b + _GOLDEN))
        else:
            h = mix64(h ^ ((int(part) + _GOLDEN) & _M64))
    return h


class Stream:
    """One independent random stream addressed by (key, position)."""

    def __init__(self, seed: int, *path):
        self.key = derive_key(seed, *path)
        self.pos = 0

    def _raw(self, n: int):
        idx = np.arange(self.pos, self.pos + n, dtype=np.uint64)
        self.pos += n
        return _mix_array(np.uint64(self.key) + idx * np.uint64(_GOLDEN))

    def uniform(self, shape=()) -> np.ndarray:
        """float64 draws in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else float(u[0])

    def randint(self, lo: int, hi: int, shape=()):
        """Integer draws in [lo, hi). Modulo bias is negligible for hi-lo << 2^64."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        v = lo + (self._raw(n) % np.uint64(hi - lo)).astype(np.int64)
        return v.reshape(shape) if shape else int(v[0])

    def normal(self, shape=(), sigma=1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.maximum(self.uniform((m,)), 2.0**-53)
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = z * sigma
        return z.reshape(shape) if shape else float(z[0])
