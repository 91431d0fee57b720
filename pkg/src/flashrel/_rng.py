"""Deterministic named random substreams derived from one 64-bit seed."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1

# Every stochastic subsystem draws from its own named stream so that adding
# draws in one subsystem never perturbs another.
DOMAINS = ("array", "workload", "ecc", "recovery")


def _token_int(token: int | str) -> int:
    if isinstance(token, int):
        return token & _MASK64
    digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *path: int | str) -> np.random.SeedSequence:
    entropy = [seed & _MASK64] + [_token_int(t) for t in path]
    return np.random.SeedSequence(entropy)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the given seed and hierarchical path, e.g.
    substream(seed, "array", block_index)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))
