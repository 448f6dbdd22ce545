"""Named random streams derived from a single integer seed."""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Generator for ``(seed, purpose, index)``.

    Streams with different purposes or indices are statistically independent,
    and the mapping depends only on its arguments.
    """
    digest = hashlib.sha256(f"{int(seed)}/{purpose}/{int(index)}".encode()).digest()
    words = np.frombuffer(digest, dtype="<u4")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def chain_generators(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """One independent generator per chain, derived from ``rng``.

    Chain ``i`` depends only on the parent draw and ``i``, so splitting a batch
    across workers never changes any chain.
    """
    root = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(n)]
