"""Deterministic counter-based randomness shared by every component.

The generator is SplitMix64 driven in counter mode: draw number ``n`` of a
stream is ``mix64(seed + n * GOLDEN)``, so a stream is fully described by
``(seed, counter)``, can be replayed from any point, and never carries
hidden state.  The compiled kernels regenerate the exact same values from
``(seed, counter)``, which is what makes dropout masks identical across
backends and across runs.

All uniforms are doubles in [0, 1) built from the top 53 bits of the mixed
word.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x00000100000001B3
_INV_2_53 = 2.0 ** -53


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, *parts: int | str) -> int:
    """Fold labels/indices into a seed to obtain an independent substream."""
    h = seed & MASK64
    for part in parts:
        if isinstance(part, str):
            p = _fnv1a64(part.encode("utf-8"))
        else:
            p = part & MASK64
        h = mix64((h + GOLDEN) ^ p)
    return h


def uniform_block(seed: int, counter: int, n: int) -> np.ndarray:
    """Draws ``counter .. counter+n-1`` of the stream, vectorized.

    Matches ``mix64(seed + n*GOLDEN) >> 11`` scaled by 2**-53 bit for bit.
    """
    if n == 0:
        return np.empty(0, dtype=np.float64)
    idx = np.arange(counter, counter + n, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53


class RandomStream:
    """A replayable uniform stream identified by ``(seed, counter)``."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & MASK64
        self.counter = counter

    def uniform(self, shape: int | tuple[int, ...] | None = None):
        """Next uniform(s) in [0, 1); advances the counter."""
        if shape is None:
            block = uniform_block(self.seed, self.counter, 1)
            self.counter += 1
            return float(block[0])
        if isinstance(shape, int):
            shape = (shape,)
        n = 1
        for s in shape:
            n *= s
        block = uniform_block(self.seed, self.counter, n)
        self.counter += n
        return block.reshape(shape)

    def skip(self, n: int) -> None:
        """Advance past ``n`` draws consumed elsewhere (e.g. inside a kernel)."""
        self.counter += n

    def spawn(self, *parts: int | str) -> "RandomStream":
        """Independent stream derived from this stream's seed and labels."""
        return RandomStream(derive_seed(self.seed, *parts))

    def index(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("index() needs n >= 1")
        return int(self.uniform() * n)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using one draw per position."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self.uniform() * (i + 1))
            items[i], items[j] = items[j], items[i]
