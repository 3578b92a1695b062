"""Portable pseudo-random streams.

The generator is xoshiro256++ seeded by splitmix64, so the same 64-bit
seed reproduces the same stream in any language:

* ``seed_state(seed)``: four successive splitmix64 outputs starting from ``seed``.
* ``prng_next``: one xoshiro256++ step, returning a uint64.
* uniform doubles are ``(x >> 11) * 2**-53`` in ``[0, 1)``.
* ``gaussian``: Box-Muller on two uniforms ``u1 = 1 - U``, ``u2 = U``,
  returning ``sqrt(-2 ln u1) * cos(2 pi u2)`` (the sine branch is discarded so
  each normal consumes exactly two draws).
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> tuple[int, int]:
    """Returns ``(output, next_x)``."""
    x = (x + GOLDEN) & MASK64
    return _mix64(x), x


def seed_state(seed: int) -> tuple[int, int, int, int]:
    x = seed & MASK64
    words = []
    for _ in range(4):
        out, x = splitmix64(x)
        words.append(out)
    if not any(words):
        words[0] = 1
    return tuple(words)


def derive_seed(seed: int, *indices: int) -> int:
    """Child seed for a sub-stream, e.g. ``derive_seed(run_seed, pair_index)``."""
    s = seed & MASK64
    for i in indices:
        s = _mix64((s ^ _mix64((i + GOLDEN) & MASK64)) & MASK64)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def prng_next(state):
    s0, s1, s2, s3 = state
    result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
    t = (s1 << 17) & MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    return result, (s0, s1, s2, s3)


def uniform(state):
    x, state = prng_next(state)
    return (x >> 11) * (1.0 / (1 << 53)), state


def gaussian(state):
    u1, state = uniform(state)
    u2, state = uniform(state)
    return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2), state


class Rng:
    """Stateful wrapper around the functional stream."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = seed_state(self.seed)

    def next_u64(self) -> int:
        x, self.state = prng_next(self.state)
        return x

    def uniform(self, size=None):
        if size is None:
            u, self.state = uniform(self.state)
            return u
        n = int(np.prod(size))
        out = np.empty(n)
        state = self.state
        for i in range(n):
            out[i], state = uniform(state)
        self.state = state
        return out.reshape(size)

    def normal(self, size=None):
        if size is None:
            z, self.state = gaussian(self.state)
            return z
        n = int(np.prod(size))
        # inlined xoshiro256++ / Box-Muller; identical to repeated gaussian()
        s0, s1, s2, s3 = self.state
        out = np.empty(n)
        scale = 1.0 / (1 << 53)
        two_pi = 2.0 * math.pi
        for i in range(n):
            u = [0.0, 0.0]
            for j in range(2):
                x = (s0 + s3) & MASK64
                r = ((((x << 23) | (x >> 41)) & MASK64) + s0) & MASK64
                t = (s1 << 17) & MASK64
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
                u[j] = (r >> 11) * scale
            out[i] = math.sqrt(-2.0 * math.log(1.0 - u[0])) * math.cos(two_pi * u[1])
        self.state = (s0, s1, s2, s3)
        return out.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)`` via the multiply-shift map."""
        if size is None:
            return (self.next_u64() * high) >> 64
        return np.array([(self.next_u64() * high) >> 64 for _ in range(int(np.prod(size)))]).reshape(size)

    def numpy_generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream, for bulk training noise."""
        return np.random.default_rng(self.next_u64())
