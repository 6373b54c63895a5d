"""Portable seeded random streams.

All randomness in the package comes from :class:`Stream`, which draws raw
64-bit words from the PCG64 generator (PCG-XSL-RR 128/64, seeded through
NumPy's ``SeedSequence``). Only the raw word stream is taken from NumPy;
every transformation to floats, normals, gamma, Poisson counts and
permutations is done here, so trajectories do not depend on NumPy's
distribution code, which is not guaranteed stable across releases.

Uniform doubles use the top 53 bits of each word: ``(w >> 11) * 2**-53``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_U64_MASK = (1 << 64) - 1
_TWO_NEG_53 = 2.0**-53


def derive_seed(*parts: int) -> int:
    """Hash a sequence of nonnegative integers into a 64-bit seed."""
    h = hashlib.blake2b(digest_size=8, person=b"fedclaims-seed")
    for part in parts:
        h.update(struct.pack("<Q", int(part) & _U64_MASK))
    return int.from_bytes(h.digest(), "little")


class Stream:
    """Seeded source of uniform, normal, gamma and Poisson variates."""

    def __init__(self, seed: int):
        if seed < 0 or seed > _U64_MASK:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self._bits = np.random.PCG64(int(seed))

    def raw(self, size: int) -> np.ndarray:
        if size == 0:
            return np.empty(0, dtype=np.uint64)
        return np.asarray(self._bits.random_raw(size), dtype=np.uint64)

    def uniform(self, size: int) -> np.ndarray:
        """Doubles on [0, 1)."""
        return (self.raw(size) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def uniform_open(self, size: int) -> np.ndarray:
        """Doubles on (0, 1], safe to pass to log."""
        return 1.0 - self.uniform(size)

    def normal(self, size: int) -> np.ndarray:
        # Box-Muller; both outputs of each pair are used.
        pairs = (size + 1) // 2
        u1 = self.uniform_open(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:size]

    def gamma(self, shape: float, scale: float, size: int) -> np.ndarray:
        """Marsaglia-Tsang squeeze/rejection sampler, vectorised over rejections."""
        if shape <= 0 or scale <= 0:
            raise ValueError("gamma shape and scale must be positive")
        if size == 0:
            return np.empty(0)
        if shape < 1.0:
            boosted = self.gamma(shape + 1.0, 1.0, size)
            u = self.uniform_open(size)
            return scale * boosted * u ** (1.0 / shape)

        d = shape - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(size)
        pending = np.arange(size)
        while pending.size:
            m = pending.size
            x = self.normal(m)
            u = self.uniform_open(m)
            v = 1.0 + c * x
            ok = v > 0.0
            v = np.where(ok, v * v * v, 1.0)
            x2 = x * x
            accept = ok & (
                (u < 1.0 - 0.0331 * x2 * x2)
                | (np.log(u) < 0.5 * x2 + d * (1.0 - v + np.log(v)))
            )
            out[pending[accept]] = d * v[accept]
            pending = pending[~accept]
        return out * scale

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        """Counts of unit-rate exponential arrivals falling in ``[0, lam]``."""
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("Poisson rates must be finite and nonnegative")
        counts = np.zeros(lam.shape, dtype=np.int64)
        clock = np.zeros(lam.shape)
        active = np.flatnonzero(lam > 0)
        while active.size:
            clock[active] += -np.log(self.uniform_open(active.size))
            arrived = clock[active] <= lam[active]
            counts[active[arrived]] += 1
            active = active[arrived]
        return counts

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` via sorted random keys."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")
