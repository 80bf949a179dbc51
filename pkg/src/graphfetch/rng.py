"""Seed fan-out: one global seed, independent reproducible sub-streams per purpose."""

import zlib

import numpy as np


def purpose_key(seed: int, purpose: str) -> list[int]:
    # crc32 of the tag keeps derivation stable across Python processes (hash() is salted)
    return [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode("utf-8"))]


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, purpose)."""
    ss = np.random.SeedSequence(purpose_key(seed, purpose))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, purpose: str) -> int:
    ss = np.random.SeedSequence(purpose_key(seed, purpose))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
