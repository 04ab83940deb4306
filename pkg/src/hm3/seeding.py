"""Deterministic seed derivation.

Every stage of a run draws its randomness from a seed derived as
``hash(master_seed, label)``, so stages are reproducible in isolation and
independent of execution order or parallel schedule.
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "name_key", "philox_rng"]


def derive_seed(master_seed: int, label: str) -> int:
    """Map (master seed, stage label) to a stable unsigned 64-bit seed."""
    digest = hashlib.blake2b(
        f"{master_seed & 0xFFFFFFFFFFFFFFFF}:{label}".encode("utf-8"),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little")


def name_key(name: str) -> int:
    """Stable unsigned 64-bit key for a tensor name."""
    return int.from_bytes(
        hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little"
    )


def philox_rng(*key_words: int) -> np.random.Generator:
    """Counter-based generator keyed by up to two 64-bit words.

    The value stream depends only on the key, never on how many values other
    streams have drawn, which makes per-tensor randomness independent of
    iteration order.
    """
    key = np.zeros(2, dtype=np.uint64)
    for i, word in enumerate(key_words):
        key[i] = np.uint64(word & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))
