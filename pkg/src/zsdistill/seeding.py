"""Root-seed fan-out.

Every consumer of randomness asks for ``rng(root, tag)``; the tag is hashed
into the seed sequence so adding a new consumer never shifts existing streams.
"""

import hashlib

import numpy as np


def derive_seed(root: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng(root: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag))
