"""Named random substreams derived from a single run seed.

Every source of randomness in a run (data shuffling, mask sampling, weight
init, dropout) pulls from its own substream so that components can be
reproduced in isolation.  Substreams are stateless: the stream for
(seed, "mask", epoch, step, i) is recomputed identically on resume, with no
generator state to persist.  Parallel data workers derive their stream from
(seed, "data", worker_id, epoch).
"""

import zlib

import numpy as np


def substream_seed(seed: int, name: str, *indices: int) -> int:
    """64-bit seed for the named substream at the given index path."""
    # crc32 keeps the name hash stable across processes (unlike hash()).
    key = (zlib.crc32(name.encode()), *(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Fresh numpy Generator for the named substream."""
    return np.random.default_rng(substream_seed(seed, name, *indices))
