"""Named random streams derived from one run seed.

Each consumer ("init", "patches", "deform", "phantom", ...) draws from its
own stream, so adding a consumer never shifts another one's numbers.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "patches", "deform", "phantom")


def stream_seed(seed: int, name: str, *keys: int) -> int:
    tag = zlib.crc32(name.encode())
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *(int(k) for k in keys)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name, *keys))
