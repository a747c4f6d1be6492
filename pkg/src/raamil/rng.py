"""Deterministic pseudo-random streams shared by every stochastic component.

The generator is SplitMix64 run in counter mode: the i-th output of a stream
with seed ``s`` is ``mix64(s + i * GOLDEN)`` where ``mix64`` is the standard
64-bit shift-xor-multiply finalizer.  Because outputs depend only on
``(seed, counter)`` the stream can be produced in vectorized blocks with
exact wraparound uint64 arithmetic, which makes draws bit-identical across
platforms and independent of block sizes.

Independent streams for different purposes (fold splits, synthetic data,
weight init, dropout) are derived by absorbing purpose tags into the seed
through the same mixer, so no two purposes ever share a counter sequence.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# 2^-53; uniform doubles use the top 53 bits of each word
_U53_SCALE = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (in place on a copy)."""
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master_seed: int, *tags: int | str) -> int:
    """Fold purpose tags into a master seed, one mixer round per tag.

    String tags hash their UTF-8 bytes through the mixer first so that e.g.
    ``("init", 3)`` and ``("dropout", 3)`` land in unrelated streams.
    """
    state = _mix64_int(master_seed)
    for tag in tags:
        if isinstance(tag, str):
            value = 0
            for byte in tag.encode("utf-8"):
                value = _mix64_int(value * 257 + byte + 1)
        else:
            value = int(tag) & _MASK64
        state = _mix64_int(state ^ _mix64_int(value + 0x632BE59BD9B4E019))
    return state


class Stream:
    """One deterministic SplitMix64 stream with a monotone draw counter.

    Consecutive draws continue the counter, so ``uniform(n)`` followed by
    ``uniform(m)`` yields exactly the concatenation ``uniform(n + m)`` would.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _MASK64)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words."""
        if n < 0:
            raise ValueError(f"draw count must be >= 0, got {n}")
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(self._seed + ks * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53_SCALE

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller (no rejection)."""
        half = (n + 1) // 2
        words = self._raw(2 * half)
        # u1 in (0, 1] keeps log finite; u2 in [0, 1)
        u1 = ((words[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_SCALE
        u2 = (words[half:] >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * half)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal_array(self, shape: tuple[int, ...]) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        return self.normal(size).reshape(shape)

    def below(self, bound: int) -> int:
        """One integer uniform on [0, bound)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return min(int(self.uniform(1)[0] * bound), bound - 1)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers uniform on [low, high] inclusive."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        vals = np.minimum((self.uniform(n) * span).astype(np.int64), span - 1)
        return vals + low

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle; returns a new list."""
        out = list(items)
        n = len(out)
        if n < 2:
            return out
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            out[i], out[j] = out[j], out[i]
        return out

    def subset(self, items: list, count: int) -> list:
        """Deterministic sample of `count` items without replacement."""
        if count > len(items):
            raise ValueError(f"cannot take {count} of {len(items)} items")
        return self.shuffle(items)[:count]


def stream(master_seed: int, *tags: int | str) -> Stream:
    """Stream for one purpose, e.g. ``stream(seed, "init", fold_id)``."""
    return Stream(derive_seed(master_seed, *tags))
