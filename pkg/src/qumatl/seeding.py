"""Fan a single root seed out into independent, named random streams."""

import hashlib

import numpy as np


def derive_seed(root: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag))
