"""Counter-based random substreams.

Every Monte-Carlo consumer asks for a generator by a label path such as
``(seed, "mn", n, candidate, block)``.  The label path is hashed into a
Philox key, so a substream depends only on its labels and never on how many
other streams were drawn before it or on which worker draws it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> np.ndarray:
    text = repr((int(seed),) + tuple(str(x) for x in labels)).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


def substream(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
