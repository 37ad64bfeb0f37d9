"""Named RNG streams so every random draw is a pure function of
(seed, stream, step) and runs reproduce bit-exactly, including after a
resume. Stream ids are part of the on-disk compatibility surface: changing
them changes every trajectory.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 0  # parameter initialization
STREAM_EPOCH = 1  # per-language epoch shuffles, keyed (lang index, epoch)
STREAM_LANG = 2  # per-step language draws
STREAM_MASK = 3  # per-step MLM corruption
STREAM_DROPOUT = 4  # per-step dropout masks


def stream_rng(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, key)]))
