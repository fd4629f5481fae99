"""Deterministic seed derivation and global RNG setup.

Every training stage and data split derives its own seed from a base seed
plus a string tag, so that adding or reordering stages never shifts the
randomness of unrelated ones.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(base_seed: int, *tags: object) -> int:
    """Derive a stable 63-bit seed from a base seed and a tag tuple."""
    payload = repr((int(base_seed),) + tuple(str(t) for t in tags)).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def seed_all(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch RNGs; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen
