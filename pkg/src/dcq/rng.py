"""Deterministic counter-based random streams keyed by structured tuples.

Every random artifact in the package is drawn from a Philox generator whose
128-bit key is derived from ``(seed, stream_tag, *indices)``. Streams are
therefore order-independent: drawing identity 17's noise never depends on
whether identity 16 was drawn first, and any value can be regenerated from
its key alone.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags. Keep them unique package-wide so no two call sites can
# collide on a key.
CENTERS = 1
INSTANCE_NOISE = 2
BATCH = 3
PROTOCOL = 4
PARAM_INIT = 5
EVAL_NOISE = 6


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *path: int) -> list[int]:
    """Mix a seed and integer path components into a 128-bit Philox key."""
    h = _splitmix64(seed & _MASK64)
    for part in path:
        h = _splitmix64(h ^ _splitmix64((int(part) & _MASK64) ^ 0xD1B54A32D192ED03))
    return [h, _splitmix64(h ^ 0x9E3779B97F4A7C15)]


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent deterministic generator for the given (seed, *path) key."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))
