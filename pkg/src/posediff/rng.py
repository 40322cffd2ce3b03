"""Deterministic random-number derivation.

Every stochastic draw in the package comes from a generator derived from a
64-bit base seed plus an integer/string path, e.g.::

    rng_for(seed, "hypothesis", h, "step", m)

String path components are hashed to integers with SHA-256, so the derivation
is stable across processes and platforms. Identical (seed, path) pairs yield
bit-identical streams, which is what makes training resumable and inference
byte-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["rng_for", "gaussian"]

_MASK64 = (1 << 64) - 1


def _path_entry(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"seed path components must be int or str, got {type(part)!r}")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by (seed, *path)."""
    entropy = [int(seed) & _MASK64] + [_path_entry(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def gaussian(shape, seed: int, *path, dtype=np.float64) -> np.ndarray:
    """Unit-Gaussian tensor, reproducible from (seed, *path)."""
    return rng_for(seed, *path).standard_normal(shape).astype(dtype, copy=False)
