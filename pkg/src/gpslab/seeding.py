"""Named random streams derived from one root seed.

A stream is identified by ``(module, op, replica)``.  The pair
``module.op`` is hashed into two 32-bit words which, together with the
replica index, form the spawn key of a :class:`numpy.random.SeedSequence`.
The bit generator is Philox (counter based), so the numbers a replica sees
do not depend on how replicas are scheduled across threads.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(module: str, op: str) -> tuple[int, int]:
    digest = hashlib.sha256(f"{module}.{op}".encode()).digest()
    return int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")


def seed_sequence(root: int, module: str, op: str, replica: int = 0) -> np.random.SeedSequence:
    w0, w1 = _name_words(module, op)
    return np.random.SeedSequence(int(root), spawn_key=(w0, w1, int(replica)))


def stream(root: int, module: str, op: str, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(root, module, op, replica)))


def derived_seed(root: int, module: str, op: str, replica: int = 0) -> int:
    """64-bit fingerprint of a stream, recorded in run manifests."""
    state = seed_sequence(root, module, op, replica).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def as_generator(seed) -> np.random.Generator:
    """Accept an int, a SeedSequence or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(int(seed)))
