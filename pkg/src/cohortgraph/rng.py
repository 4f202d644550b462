"""Deterministic seed derivation so one master seed drives every module."""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Hash (master, tags) into a stable 63-bit seed.

    Tags may be strings or ints; the same inputs always give the same seed,
    across processes and platforms.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"|")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def make_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
