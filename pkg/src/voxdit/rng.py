"""Seedable, splittable counter-based random streams.

Every stochastic operation in the package draws from a Philox generator keyed by
``(seed, *path)``. Two calls with the same key produce identical streams, and
distinct paths give statistically independent streams, so a training step can
be regenerated from ``(seed, step)`` alone.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream path entries must be non-negative, got {part}")
    return int(part)


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Return the Philox stream identified by ``seed`` and ``path``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), *(_word(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *path: int | str) -> int:
    """Derive a 63-bit integer seed for APIs that want a plain int."""
    return int(make_rng(seed, "child", *path).integers(0, 2**63 - 1))
