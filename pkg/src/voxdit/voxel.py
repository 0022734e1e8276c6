"""Voxelization, trilinear devoxelization and patch tokenization.

Layout conventions
------------------
A grid ``feat`` has shape ``(V, V, V, 3)`` indexed ``[x, y, z, channel]``.
Cell ``idx`` along an axis spans ``[-1 + 2 idx / V, -1 + 2 (idx + 1) / V)`` and
its center sits at ``(idx + 0.5) / V * 2 - 1``.

``patchify`` cuts the grid into ``G = V / p`` blocks per axis. Tokens are
ordered lexicographically by patch coordinate ``(i, j, k)`` (``k`` fastest).
Inside a token the ``p**3`` cells are listed z-major (``dz`` slowest, ``dx``
fastest) with the three channels last, giving a raw width of ``3 p**3``.

``patchify``, ``unpatchify`` and ``devoxelize`` accept numpy arrays or torch
tensors; the torch path is differentiable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import PointCloud

_ONE_MINUS_ULP = np.nextafter(1.0, -1.0)


def _is_pow2(v: int) -> bool:
    return v >= 2 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class VoxelGrid:
    V: int
    feat: np.ndarray  # (V, V, V, 3)
    count: np.ndarray  # (V, V, V) int64

    @property
    def occupied(self) -> np.ndarray:
        return self.count > 0


def cell_index(points: np.ndarray, V: int) -> np.ndarray:
    """Integer cell coordinates ``(N, 3)`` after clamping into ``[-1, 1)``."""
    x = np.clip(np.asarray(points, dtype=np.float64), -1.0, _ONE_MINUS_ULP)
    idx = np.floor((x + 1.0) / 2.0 * V).astype(np.int64)
    return np.minimum(idx, V - 1)


def voxelize(cloud: PointCloud | np.ndarray, V: int) -> VoxelGrid:
    """Hard-assign points to cells; feature = mean coordinate of members."""
    if not _is_pow2(V):
        raise ValueError(f"V must be a power of two >= 2, got {V}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates")
    pts = pts.reshape(-1, 3)
    flat = np.ravel_multi_index(cell_index(pts, V).T, (V, V, V)) if len(pts) else np.zeros(0, np.int64)
    count = np.bincount(flat, minlength=V**3)
    sums = np.stack([np.bincount(flat, weights=pts[:, c], minlength=V**3) for c in range(3)], axis=1)
    feat = np.zeros((V**3, 3))
    occ = count > 0
    feat[occ] = sums[occ] / count[occ, None]
    return VoxelGrid(V, feat.reshape(V, V, V, 3), count.reshape(V, V, V))


def _trilinear_setup(queries, V: int, xp):
    u = (queries + 1.0) / 2.0 * V - 0.5
    u = u.clip(0.0, V - 1.0) if xp is np else u.clamp(0.0, V - 1.0)
    i0 = xp.floor(u)
    i0 = i0.clip(0, V - 2) if xp is np else i0.clamp(0, V - 2)
    w = u - i0
    i0 = i0.astype(np.int64) if xp is np else i0.long()
    return i0, w


def devoxelize(feat, queries):
    """Trilinear interpolation of ``feat`` (V,V,V,C) at ``queries`` (M,3).

    Out-of-range queries clamp to the boundary cell centers.
    """
    xp = torch if isinstance(feat, torch.Tensor) else np
    V = feat.shape[0]
    if xp is np:
        queries = np.asarray(queries, dtype=np.float64)
        if not np.all(np.isfinite(queries)):
            raise ValueError("non-finite query coordinates")
    else:
        queries = torch.as_tensor(queries, dtype=feat.dtype)
        if not torch.isfinite(queries).all():
            raise ValueError("non-finite query coordinates")
    i0, w = _trilinear_setup(queries, V, xp)
    out = 0.0
    for dx in (0, 1):
        wx = w[:, 0] if dx else 1.0 - w[:, 0]
        for dy in (0, 1):
            wy = w[:, 1] if dy else 1.0 - w[:, 1]
            for dz in (0, 1):
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                corner = feat[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + (wx * wy * wz)[:, None] * corner
    return out


def _permute(x, axes):
    return x.permute(*axes) if isinstance(x, torch.Tensor) else np.transpose(x, axes)


def patchify(feat, p: int):
    """(V,V,V,C) grid -> (L, C*p**3) tokens; see module docstring for layout."""
    V = feat.shape[0]
    C = feat.shape[-1]
    if p < 1 or V % p:
        raise ValueError(f"patch size {p} does not divide V={V}")
    G = V // p
    x = feat.reshape(G, p, G, p, G, p, C)
    x = _permute(x, (0, 2, 4, 5, 3, 1, 6))
    return x.reshape(G**3, p**3 * C)


def unpatchify(tokens, V: int, p: int, channels: int = 3):
    """Exact inverse of :func:`patchify`."""
    if p < 1 or V % p:
        raise ValueError(f"patch size {p} does not divide V={V}")
    G = V // p
    if tuple(tokens.shape) != (G**3, channels * p**3):
        raise ValueError(
            f"token shape {tuple(tokens.shape)} does not match L={G**3}, width={channels * p**3}"
        )
    x = tokens.reshape(G, G, G, p, p, p, channels)
    x = _permute(x, (0, 5, 1, 4, 2, 3, 6))
    return x.reshape(V, V, V, channels)


def patch_origins(V: int, p: int) -> np.ndarray:
    """Patch lattice coordinates ``(L, 3)`` in token order."""
    G = V // p
    return np.stack(np.meshgrid(np.arange(G), np.arange(G), np.arange(G), indexing="ij"), -1).reshape(-1, 3)


def point_patch_index(points: np.ndarray, V: int, p: int) -> np.ndarray:
    """Token index of the patch containing each point's cell."""
    G = V // p
    pc = cell_index(points, V) // p
    return (pc[:, 0] * G + pc[:, 1]) * G + pc[:, 2]


def dump_grid(path: str | Path, grid: VoxelGrid) -> None:
    """Debug dump: u32 V, then the feat array as little-endian f32 (x, y, z, channel order)."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", grid.V))
        f.write(np.ascontiguousarray(grid.feat, dtype="<f4").tobytes())


def load_grid_dump(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (V,) = struct.unpack("<I", raw[:4])
    return np.frombuffer(raw, dtype="<f4", offset=4).reshape(V, V, V, 3)
