"""Foreground/background patch labels, occupancy statistics and token masks."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import PointCloud
from .rng import make_rng
from .voxel import VoxelGrid, patchify, point_patch_index, voxelize

# Guards the floor against binary round-off of decimal ratios, e.g. 0.29 * 100.
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class PatchLabels:
    labels: np.ndarray  # (L,) bool, True = foreground

    @property
    def L(self) -> int:
        return int(self.labels.size)

    @property
    def L_f(self) -> int:
        return int(self.labels.sum())

    @property
    def L_b(self) -> int:
        return self.L - self.L_f


@dataclass(frozen=True)
class MaskVector:
    m: np.ndarray  # (L,) bool, True = masked
    r_f: float
    r_b: float

    @property
    def L(self) -> int:
        return int(self.m.size)

    @property
    def L_u(self) -> int:
        return int(self.L - self.m.sum())

    @property
    def unmasked_index(self) -> np.ndarray:
        return np.flatnonzero(~self.m)


def masked_count(ratio: float, n: int) -> int:
    """``floor(ratio * n)``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    return min(n, math.floor(ratio * n + _FLOOR_SLACK))


def unmasked_count(L_f: int, L_b: int, r_f: float, r_b: float) -> int:
    return L_f + L_b - masked_count(r_f, L_f) - masked_count(r_b, L_b)


def classify_patches(grid: VoxelGrid, p: int) -> PatchLabels:
    """A patch is foreground iff any of its cells is occupied."""
    occ = patchify(grid.count[..., None], p)
    return PatchLabels(np.asarray(occ > 0).any(axis=1))


def occupancy_stats(clouds: list[PointCloud], V: int, p: int) -> dict[int | str, tuple[float, float]]:
    """Mean foreground-patch percentage per class, plus ``"all"`` over every cloud."""
    if not clouds:
        raise ValueError("empty dataset")
    per_class: dict[int, list[float]] = defaultdict(list)
    for c in clouds:
        lab = classify_patches(voxelize(c, V), p)
        per_class[c.label].append(100.0 * lab.L_f / lab.L)
    out: dict[int | str, tuple[float, float]] = {}
    for k in sorted(per_class):
        occ = float(np.mean(per_class[k]))
        out[k] = (occ, 100.0 - occ)
    overall = float(np.mean([v for vals in per_class.values() for v in vals]))
    out["all"] = (overall, 100.0 - overall)
    return out


def build_mask(labels: PatchLabels, r_f: float, r_b: float, seed: int) -> MaskVector:
    """Mask floor(r_f L_f) foreground and floor(r_b L_b) background patches uniformly."""
    rng = make_rng(seed, "fb_mask")
    fg = np.flatnonzero(labels.labels)
    bg = np.flatnonzero(~labels.labels)
    m = np.zeros(labels.L, dtype=bool)
    for pool, r in ((fg, r_f), (bg, r_b)):
        k = masked_count(r, pool.size)
        if k:
            m[rng.choice(pool, size=k, replace=False)] = True
    return MaskVector(m, r_f, r_b)


def random_mask(L: int, r: float, seed: int) -> MaskVector:
    """Label-blind baseline: floor(r L) patches masked uniformly."""
    rng = make_rng(seed, "random_mask")
    m = np.zeros(L, dtype=bool)
    m[rng.choice(L, size=masked_count(r, L), replace=False)] = True
    return MaskVector(m, r, r)


def no_mask(L: int) -> MaskVector:
    return MaskVector(np.zeros(L, dtype=bool), 0.0, 0.0)


def select_unmasked(tokens, mask: MaskVector | np.ndarray):
    """Order-preserving gather of unmasked tokens and their positions."""
    m = mask.m if isinstance(mask, MaskVector) else np.asarray(mask, dtype=bool)
    if len(tokens) != m.size:
        raise ValueError(f"{len(tokens)} tokens but mask has length {m.size}")
    idx = np.flatnonzero(~m)
    if isinstance(tokens, torch.Tensor):
        return tokens[torch.from_numpy(idx)], idx
    return np.asarray(tokens)[idx], idx


def scatter_tokens(tokens_u, index: np.ndarray, fill):
    """Place ``tokens_u`` at ``index`` in a copy of ``fill`` (L, ...) ."""
    if isinstance(fill, torch.Tensor):
        return fill.index_copy(0, torch.from_numpy(np.asarray(index, dtype=np.int64)), tokens_u)
    out = np.array(fill, copy=True)
    out[index] = tokens_u
    return out


def lift_point_mask(points: np.ndarray, mask: MaskVector, V: int, p: int) -> np.ndarray:
    """Each point inherits the mask bit of the patch containing its cell."""
    return mask.m[point_patch_index(points, V, p)]
