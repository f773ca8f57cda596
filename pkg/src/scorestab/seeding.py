"""Deterministic seed splitting.

Every random stream is derived from one root seed. A stream is addressed by a
stage name and an integer index, so replicates can run in any order or in any
worker and still draw the same numbers.
"""
from __future__ import annotations

import zlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.integer, np.random.SeedSequence, np.random.Generator, None]


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def derive(root: int | np.random.SeedSequence, stage: str, index: int = 0) -> np.random.SeedSequence:
    """SeedSequence for ``(stage, index)`` under ``root``."""
    if isinstance(root, np.random.SeedSequence):
        entropy = root.entropy
        base_key = tuple(root.spawn_key)
    else:
        entropy = int(root)
        base_key = ()
    if entropy is None:
        raise ValueError("root seed sequence has no entropy")
    return np.random.SeedSequence(entropy, spawn_key=base_key + (stage_key(stage), int(index)))


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Turn any accepted seed form into a Generator.

    A Generator is returned unchanged (the caller owns its state).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if isinstance(seed, (bool,)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"unsupported seed type {type(seed).__name__}")
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return np.random.Generator(np.random.PCG64(int(seed)))


def stream(root: SeedLike, stage: str, index: int = 0) -> np.random.Generator:
    """Generator for ``(stage, index)``; ``root`` may be an int or SeedSequence."""
    if isinstance(root, np.random.Generator):
        # Draw a child entropy so the derived stream is still reproducible.
        entropy = int(root.integers(0, 2**63))
        return as_generator(derive(entropy, stage, index))
    return as_generator(derive(root, stage, index))
