"""Counter-based deterministic random streams.

Every random draw in the pipeline flows through `stream(seed, *context)`.
The context tuple (e.g. ("weak", patch_id, step)) indexes an independent
generator, so results never depend on worker count or evaluation order.
Strings are folded in through blake2b, never the process-salted builtin
hash.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _fold(item) -> int:
    if isinstance(item, (int, np.integer)):
        return int(item) & 0xFFFFFFFFFFFFFFFF
    if isinstance(item, str):
        digest = hashlib.blake2b(item.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream context items must be int or str, got {type(item)!r}")


def stream(seed: int, *context) -> np.random.Generator:
    """Return the generator for one (seed, *context) slot.

    Identical arguments always yield an identical stream; distinct context
    tuples yield statistically independent streams.
    """
    entropy = [_fold(seed)] + [_fold(c) for c in context]
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence(entropy).generate_state(2, np.uint64)))
