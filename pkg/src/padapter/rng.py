"""Deterministic random streams.

All randomness in this package flows from a single integer seed through named
sub-streams.  A sub-stream key is derived by folding string/integer tags into
a splitmix64 chain, and each stream is a xoshiro256** generator whose state is
seeded from splitmix64 of the derived key.  Everything is computed with exact
64-bit integer arithmetic, so streams are reproducible across platforms and
processes.

Bulk generation runs several xoshiro lanes in lockstep (lane i seeded from
splitmix64(key, i)) so large draws vectorize across numpy uint64 arrays.
Gaussians come from Box-Muller on 53-bit uniforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer on a python int, returns int in [0, 2^64)."""
    x &= 0xFFFFFFFFFFFFFFFF
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def splitmix64(state: int, n: int) -> list[int]:
    """The n first outputs of splitmix64 starting from ``state``."""
    out = []
    s = state & 0xFFFFFFFFFFFFFFFF
    for _ in range(n):
        s = (s + _GOLDEN) & 0xFFFFFFFFFFFFFFFF
        out.append(_mix64(s))
    return out


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array (wrapping arithmetic)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def derive_key(seed: int, *tags: int | str) -> int:
    """Fold tags into ``seed`` to name an independent sub-stream.

    Strings are folded byte-wise; integers directly.  Order matters.
    """
    k = _mix64(seed)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                k = _mix64(k ^ (b + _GOLDEN))
        else:
            k = _mix64(k ^ (int(tag) & 0xFFFFFFFFFFFFFFFF) ^ _GOLDEN)
    return k


class Stream:
    """Multi-lane xoshiro256** generator.

    Lane ``i`` is seeded with four splitmix64 outputs from ``key + i`` so the
    stream of a given (key, lanes) pair is a pure function of its arguments.
    Scalar helpers (randint, uniform, choice) consume lane 0 only.
    """

    def __init__(self, key: int, lanes: int = 64):
        self.key = key & 0xFFFFFFFFFFFFFFFF
        self.lanes = lanes
        state = np.empty((4, lanes), dtype=np.uint64)
        with np.errstate(over="ignore"):
            base = (np.uint64(_mix64(self.key))
                    + np.arange(lanes, dtype=np.uint64) * np.uint64(_GOLDEN))
            cur = _mix64_vec(base)
            for row in range(4):
                cur = cur + np.uint64(_GOLDEN)
                state[row] = _mix64_vec(cur)
        self._s = tuple(state)

    @staticmethod
    def _rotl(x: np.ndarray, k: int) -> np.ndarray:
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    def _step(self) -> np.ndarray:
        """Advance every lane once; returns one uint64 per lane."""
        s0, s1, s2, s3 = self._s
        result = self._rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s = (s0, s1, s2, self._rotl(s3, 45))
        return result

    def raw64(self, n: int) -> np.ndarray:
        """n uint64 draws, lane-major (lane 0 first within each step)."""
        steps = -(-n // self.lanes)
        out = np.empty((steps, self.lanes), dtype=np.uint64)
        for i in range(steps):
            out[i] = self._step()
        return out.reshape(-1)[:n]

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n float64 uniforms in [low, high) with 53-bit resolution."""
        u = (self.raw64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + u * (high - low)

    def normal(self, shape) -> np.ndarray:
        """Standard Gaussians via Box-Muller (pairwise, deterministic)."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        m = -(-n // 2)
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        u1 = np.maximum(u1, 2.0 ** -53)  # keep log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if isinstance(shape, int):
            return z
        return z.reshape(shape)

    def randint(self, n_exclusive: int) -> int:
        """One integer in [0, n_exclusive). Modulo reduction, documented bias
        is negligible for the small ranges used here."""
        if n_exclusive <= 0:
            raise ValueError("randint needs a positive range")
        return int(self.raw64(1)[0] % np.uint64(n_exclusive))

    def randints(self, count: int, n_exclusive: int) -> np.ndarray:
        if n_exclusive <= 0:
            raise ValueError("randints needs a positive range")
        return (self.raw64(count) % np.uint64(n_exclusive)).astype(np.int64)

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> list:
        """Fisher-Yates, returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def stream(seed: int, *tags: int | str, lanes: int = 64) -> Stream:
    """The named sub-stream of ``seed`` for the given tag path."""
    return Stream(derive_key(seed, *tags), lanes=lanes)
