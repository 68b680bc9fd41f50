"""Seed derivation: every random stream is keyed by (master seed, names...)."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash the parts into a 64-bit stream seed."""
    h = hashlib.blake2b("\x1f".join(repr(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def content_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
