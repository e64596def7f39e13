"""Named random streams derived from a single root seed.

Every source of randomness in the project draws from a stream named after
its purpose, so adding a new consumer never perturbs existing streams.
"""

import hashlib

import numpy as np


def stream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive a SeedSequence for the stream `name` from the root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.SeedSequence([root_seed & 0xFFFFFFFFFFFFFFFF, salt])


def stream_rng(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream; deterministic in (root_seed, name)."""
    return np.random.default_rng(stream_seed(root_seed, name))
