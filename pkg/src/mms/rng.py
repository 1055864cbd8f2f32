"""Deterministic random numbers built on SplitMix64.

Everything random in the package (weight init, masks, synthetic data,
shuffling) goes through this module so results depend only on integer seeds.

Algorithm
---------
SplitMix64 (Steele, Lea & Flood 2014). The state is a 64-bit counter that
advances by ``GOLDEN = 0x9E3779B97F4A7C15``; each output is the advanced
state passed through the finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

so draw ``i`` (0-based) of seed ``s`` is ``mix(s + (i + 1) * GOLDEN)``.

Derived quantities:

* ``random()``: ``(u64 >> 11) * 2**-53`` in [0, 1).
* ``randint(lo, hi)``: inclusive, ``lo + floor(random() * (hi - lo + 1))``.
* gaussian: Box-Muller on two consecutive draws, ``u1`` shifted to (0, 1].
* ``derive_seed(seed, *tags)``: each tag is folded in as
  ``seed = mix(seed ^ fnv1a64(str(tag)))``.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed, *tags):
    """Fold ``tags`` into ``seed`` to get a decorrelated child seed."""
    s = int(seed) & MASK64
    for tag in tags:
        s = mix64(s ^ fnv1a64(str(tag)))
    return s


class SplitMix64:
    """Sequential SplitMix64 stream."""

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self):
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def randint(self, lo, hi):
        """Integer in ``[lo, hi]`` (both inclusive)."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.random() * (hi - lo + 1))

    def gauss(self, mean=0.0, std=1.0):
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def sample(self, n, k):
        """``k`` distinct integers from ``range(n)`` by partial Fisher-Yates."""
        pool = list(range(n))
        for i in range(k):
            j = self.randint(i, n - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items):
        """Return a shuffled copy (Fisher-Yates, from the back)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i)
            out[i], out[j] = out[j], out[i]
        return out


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def u64_block(seed, n):
    """The first ``n`` outputs of ``SplitMix64(seed)`` as a uint64 array."""
    counters = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(int(seed) & MASK64) + counters * np.uint64(GOLDEN)
        return _mix_array(z)


def uniform_block(seed, n, lo=0.0, hi=1.0):
    """Vectorised ``[SplitMix64(seed).uniform(lo, hi) for _ in range(n)]``."""
    u = (u64_block(seed, n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return lo + (hi - lo) * u


def gaussian_block(seed, n, mean=0.0, std=1.0):
    """Box-Muller normals; draws ``2n`` uniforms, pairs are (even, odd)."""
    u = uniform_block(seed, 2 * n)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    return mean + std * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def truncated_gaussian_block(seed, n, std=0.02, bound=2.0):
    """Normals truncated to ``[-bound*std, bound*std]`` by inverse-CDF sampling."""
    from scipy.special import ndtr, ndtri

    lo = ndtr(-bound)
    hi = ndtr(bound)
    u = uniform_block(seed, n, lo, hi)
    return std * ndtri(u)
