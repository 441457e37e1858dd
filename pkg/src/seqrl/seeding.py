"""Derivation of independent, reproducible RNG streams from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Return a Generator for (seed, *labels), the same one every time.

    Streams for distinct label paths are statistically independent. Labels are
    hashed with sha256 so the mapping is stable across platforms and Python
    versions (unlike builtin hash()).
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n child generators of rng; deterministic given rng's construction path."""
    return rng.spawn(n)
