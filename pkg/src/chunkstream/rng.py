"""Counter-based Gaussian random streams.

Every draw is a pure function of ``(seed, counter)``: the counter is hashed
with the SplitMix64 finalizer, so any position in the stream can be reached
without generating the values before it.  Forked streams hash their keys into
a new seed, giving chunk- and step-local streams that never overlap in
practice and do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    # strings: FNV-1a, stable across interpreter runs unlike hash()
    h = 0xCBF29CE484222325
    for byte in str(key).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


@dataclass
class RngStream:
    seed: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.counter <= _MASK64):
            raise ValueError("seed and counter must be 64-bit unsigned integers")

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit words; advances the counter by ``n``."""
        with np.errstate(over="ignore"):
            idx = np.arange(n, dtype=np.uint64) + np.uint64(self.counter + 1)
            z = np.uint64(self.seed) + idx * _GOLDEN
            out = _mix(z)
        self.counter = (self.counter + n) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles on the half-open interval (0, 1]."""
        words = self.raw(n) >> np.uint64(11)
        return (words.astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def normal(self, dims) -> np.ndarray:
        dims = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(dims)

    def integers(self, high: int, n: int = 1) -> np.ndarray:
        """Uniform integers in ``[0, high)`` by rejection (exactly uniform)."""
        if high <= 0:
            raise ValueError("high must be positive")
        limit = (1 << 64) - ((1 << 64) % high)
        out = []
        while len(out) < n:
            for word in self.raw(n - len(out)):
                word = int(word)
                if word < limit:
                    out.append(word % high)
        return np.array(out, dtype=np.int64)

    def fork(self, *keys) -> "RngStream":
        """Independent child stream keyed by ``keys``; does not advance self."""
        h = _mix_int(self.seed ^ 0x5851F42D4C957F2D)
        for key in keys:
            h = _mix_int(h ^ _key_to_int(key))
        return RngStream(h, 0)


def gaussian(rng: RngStream, dims) -> np.ndarray:
    """I.i.d. standard normal tensor of shape ``dims``, drawn from ``rng``."""
    return rng.normal(dims)
