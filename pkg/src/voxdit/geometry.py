"""Point-cloud containers, dataset normalization, synthetic shapes and file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

FPC_MAGIC = b"FPC1"
SHAPE_KINDS = ("sphere", "box", "cross", "chairlike")
SPHERE_RADIUS = 0.8


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    label: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class Dataset:
    clouds: list[PointCloud]
    num_classes: int
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self) -> None:
        sizes = {c.n for c in self.clouds}
        if len(sizes) > 1:
            raise ValueError(f"clouds have differing sizes {sorted(sizes)}; resample first")
        for c in self.clouds:
            if not 0 <= c.label < self.num_classes:
                raise ValueError(f"label {c.label} outside [0, {self.num_classes})")

    @property
    def labels(self) -> list[int]:
        return [c.label for c in self.clouds]

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.mean


def normalize_dataset(clouds: list[PointCloud]) -> tuple[list[PointCloud], np.ndarray, float]:
    """Center on the dataset-wide mean and divide by one global L-inf extent."""
    if not clouds or all(c.n == 0 for c in clouds):
        raise ValueError("empty dataset")
    stacked = np.concatenate([c.points for c in clouds], axis=0)
    mean = stacked.mean(axis=0)
    scale = float(np.max(np.abs(stacked - mean)))
    if not scale > 0.0:
        raise ValueError("degenerate dataset")
    out = [PointCloud((c.points - mean) / scale, c.label) for c in clouds]
    return out, mean, scale


def resample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniformly pick ``n`` points; with replacement only when the source is short."""
    if cloud.n == 0:
        raise ValueError("cannot resample an empty cloud")
    rng = make_rng(seed, "resample")
    idx = rng.choice(cloud.n, size=n, replace=cloud.n < n)
    return PointCloud(cloud.points[idx], cloud.label)


def _box_surface(rng: np.random.Generator, n: int, center, half) -> np.ndarray:
    """Area-weighted uniform samples on the surface of an axis-aligned box."""
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    # faces come in +/- pairs per axis; area of a face normal to axis a
    areas = np.array([4 * half[1] * half[2], 4 * half[0] * half[2], 4 * half[0] * half[1]])
    face_p = np.repeat(areas, 2) / (2 * areas.sum())
    faces = rng.choice(6, size=n, p=face_p)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign
    return center + pts * half


def _union_of_boxes(rng: np.random.Generator, n: int, boxes) -> np.ndarray:
    areas = np.array([2 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2]) for _, h in boxes])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_box_surface(rng, k, c, h) for (c, h), k in zip(boxes, counts)]
    pts = np.concatenate(parts, axis=0)
    return pts[rng.permutation(n)]


def synth_shape(kind: str, n: int, seed: int, label: int = 0) -> PointCloud:
    """Deterministic desk-scale stand-in shapes inside [-1, 1]^3."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    rng = make_rng(seed, "synth", kind)
    if kind == "sphere":
        g = rng.standard_normal((n, 3))
        pts = SPHERE_RADIUS * g / np.linalg.norm(g, axis=1, keepdims=True)
    elif kind == "box":
        pts = _box_surface(rng, n, (0.0, 0.0, 0.0), (0.6, 0.4, 0.3))
    elif kind == "cross":
        # fuselage along x, wing along y
        pts = _union_of_boxes(rng, n, [
            ((0.0, 0.0, 0.0), (0.9, 0.12, 0.08)),
            ((0.1, 0.0, 0.0), (0.15, 0.85, 0.03)),
        ])
    else:
        # seat, back, front legs, rear legs
        pts = _union_of_boxes(rng, n, [
            ((0.0, -0.05, 0.0), (0.45, 0.05, 0.45)),
            ((0.0, 0.4, -0.42), (0.45, 0.4, 0.04)),
            ((0.0, -0.5, 0.4), (0.45, 0.4, 0.04)),
            ((0.0, -0.5, -0.4), (0.45, 0.4, 0.04)),
        ])
    return PointCloud(pts, label)


def sample_gaussian_cloud(n: int, seed: int) -> PointCloud:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return PointCloud(make_rng(seed, "gaussian").standard_normal((n, 3)))


def synthetic_dataset(kinds: list[str], per_class: int, n_points: int, seed: int) -> Dataset:
    """One class per kind, ``per_class`` shapes each, normalized dataset-wide."""
    clouds = [
        synth_shape(kind, n_points, seed + 1000 * c + i, label=c)
        for c, kind in enumerate(kinds)
        for i in range(per_class)
    ]
    normed, mean, scale = normalize_dataset(clouds)
    return Dataset(normed, num_classes=len(kinds), mean=mean, scale=scale)


# --- file formats -----------------------------------------------------------

def write_fpc(path: str | Path, cloud: PointCloud) -> None:
    """FPC1 binary: magic, u32 N, u32 class id, N*3 little-endian f32."""
    data = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FPC_MAGIC)
        f.write(struct.pack("<II", cloud.n, cloud.label))
        f.write(data.tobytes())


def read_fpc(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != FPC_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    n, label = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 12 * n:
        raise ValueError(f"{path}: expected {n} points, payload has {len(raw) - 12} bytes")
    pts = np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, 3).astype(np.float64)
    return PointCloud(pts, int(label))


def write_xyz(path: str | Path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def load_fpc_dir(path: str | Path) -> list[PointCloud]:
    files = sorted(Path(path).glob("*.fpc"))
    if not files:
        raise ValueError(f"{path}: no .fpc files")
    return [read_fpc(f) for f in files]
