"""Deterministic seed derivation from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """Hash ``(master, stage, index)`` into a non-negative 63-bit seed.

    Each stage of an experiment (and each shadow model) gets its own seed,
    so any single piece can be reproduced without replaying the others.
    """
    key = f"{int(master)}:{stage}:{int(index)}".encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def rng_for(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, index))
