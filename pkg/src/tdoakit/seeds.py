"""Named random sub-streams derived from a single master seed.

Every source of randomness in the package (scene sampling, weight init,
batch order, noise) pulls from a stream named by a tuple of labels, so any
component can be reproduced in isolation without replaying the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stable_hash(label: str) -> int:
    # zlib.crc32 is stable across processes and Python versions,
    # unlike the builtin hash().
    return zlib.crc32(label.encode("utf-8"))


def substream(master_seed: int, *labels) -> np.random.Generator:
    """Return a Generator for the sub-stream named by ``labels``.

    Labels may be strings or integers (e.g. epoch or scene indices).
    The same (master_seed, labels) always yields the same stream.
    """
    keys = [_stable_hash(x) if isinstance(x, str) else int(x) for x in labels]
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(keys))
    return np.random.default_rng(seq)
