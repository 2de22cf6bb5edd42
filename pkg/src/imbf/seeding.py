"""Seed derivation and random generator construction.

Every random stream in the package comes from ``make_rng``: numpy's PCG64 bit
generator, whose output sequence is fixed by its seed on every platform.
Normal variates come from ``Generator.standard_normal`` (numpy's ziggurat
method), uniforms from ``Generator.random``.

Sub-seeds are derived by hashing a tuple of parts with BLAKE2b (8-byte digest,
little-endian), so a stream depends only on the identity of the thing it
randomizes and never on processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np

U64_MAX = 2**64 - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def hash_seed(*parts: object) -> int:
    """Stable 64-bit hash of ``parts`` (ints and strings)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        tag = b"i" if isinstance(part, int) else b"s"
        data = str(part).encode("utf-8")
        h.update(tag + len(data).to_bytes(4, "little") + data)
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(check_seed(seed)))
