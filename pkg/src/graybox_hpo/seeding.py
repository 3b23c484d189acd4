"""Named random streams derived from a single run seed.

Every consumer of randomness (init design, extractor init, minibatch
sampling, baseline sampling, ...) draws from its own named stream, so
adding or removing one consumer never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 64-bit key for a stream name (platform independent)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for stream `name` under run seed `seed`."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream_key(name)]))
