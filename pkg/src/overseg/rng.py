"""Portable deterministic random numbers: splitmix64 + xoshiro256**.

Everything downstream (dataset synthesis, weight init, epoch shuffles)
draws from these streams, never from ``random`` or ``numpy.random``, so
results are reproducible from a single 64-bit seed and independent of
library versions. Both algorithms are implemented from their reference
constants; integer state math is exact and platform-independent.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# 1/2^53: converts the top 53 bits of a u64 into a double in [0, 1)
_INV53 = 2.0 ** -53


def splitmix64(x):
    """One splitmix64 step from state ``x``: advance by the golden gamma, mix."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(global_seed, index):
    """Per-index child seed: splitmix64(global_seed XOR index*golden).

    Used to give every sample / epoch / class its own decorrelated stream
    so work can be sharded without coordinating generator state.
    """
    return splitmix64((global_seed ^ ((index * GOLDEN) & MASK64)) & MASK64)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """A xoshiro256** stream, state filled by splitmix64 expansion of the seed."""

    def __init__(self, seed):
        s = seed & MASK64
        state = []
        for _ in range(4):
            s = (s + GOLDEN) & MASK64
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
            state.append(z ^ (z >> 31))
        self._s = state

    def next_u64(self):
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self):
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV53

    def uniform(self, lo, hi):
        return lo + self.random() * (hi - lo)

    def below(self, n):
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        threshold = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < threshold:
                return x % n

    def randint(self, lo, hi):
        """Integer in [lo, hi], both ends inclusive."""
        return lo + self.below(hi - lo + 1)

    def shuffle(self, seq):
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def normals(self, n):
        """ndarray of ``n`` N(0,1) doubles via Box-Muller pairs.

        Consumes ceil(n/2) pairs of u64 draws (u1 then u2 per pair); the
        leftover half of a final odd pair is discarded. The u64 stream is
        drawn scalar-for-scalar, then the transcendental math runs
        vectorized in float64.
        """
        if n <= 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        raw = np.empty(2 * pairs, dtype=np.uint64)
        for i in range(2 * pairs):
            raw[i] = self.next_u64()
        u = (raw >> np.uint64(11)).astype(np.float64) * _INV53
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        a = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(a)
        out[1::2] = r * np.sin(a)
        return out[:n]
