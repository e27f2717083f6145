"""Counter-based random streams.

Each stream is a Philox generator keyed by a hash of ``(seed, *path)``, so a
replicate's stream depends only on its key and never on execution order or
worker count.
"""

from __future__ import annotations

import numpy as np

# stream-path tags
DRAW_SELECTION = 0
REPLICATE = 1
FIT = 2
ANALYSIS = 3
FIGURES = 4


def stream_key(seed: int, *path: int) -> np.ndarray:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(p) for p in path)]
    return np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the key ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def child_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *path)``."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *path]).generate_state(1, np.uint64)[0] >> 1)
