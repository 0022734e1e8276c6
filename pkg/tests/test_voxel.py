import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdit.geometry import PointCloud
from voxdit.voxel import (
    cell_index,
    devoxelize,
    dump_grid,
    load_grid_dump,
    patch_origins,
    patchify,
    point_patch_index,
    unpatchify,
    voxelize,
)


def test_single_point_cell():
    g = voxelize(PointCloud([[0.0, 0.0, 0.0]]), 4)
    assert g.count[2, 2, 2] == 1 and g.count.sum() == 1
    np.testing.assert_array_equal(g.feat[2, 2, 2], [0, 0, 0])


def test_upper_boundary_lands_in_last_cell():
    g = voxelize(np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]), 4)
    assert g.count[3, 3, 3] == 1 and g.count[0, 0, 0] == 1


def test_mean_pooling():
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.2, 0.4], [-0.9, 0.0, 0.0]])
    g = voxelize(pts, 2)
    np.testing.assert_allclose(g.feat[1, 1, 1], pts[:2].mean(axis=0))
    assert g.count[1, 1, 1] == 2


def test_empty_cells_are_zero(rng):
    g = voxelize(rng.uniform(-1, 1, (50, 3)), 8)
    assert np.all(g.feat[~g.occupied] == 0)
    assert g.count.sum() == 50


@pytest.mark.parametrize("V", [0, 3, 12])
def test_rejects_non_power_of_two(V):
    with pytest.raises(ValueError, match="power of two"):
        voxelize(np.zeros((1, 3)), V)


def test_counts_match_loop_oracle(rng):
    pts = rng.uniform(-1.2, 1.2, (300, 3))
    V = 8
    expect = np.zeros((V, V, V), int)
    for p in pts:
        ijk = [min(V - 1, max(0, int(np.floor((min(max(c, -1.0), 1.0) + 1) / 2 * V)))) for c in p]
        expect[tuple(ijk)] += 1
    np.testing.assert_array_equal(voxelize(pts, V).count, expect)


def _devox_oracle(feat, q):
    """Straight eight-corner interpolation on clamped cell-centre coordinates."""
    V = feat.shape[0]
    out = np.zeros((len(q), feat.shape[-1]))
    for n, point in enumerate(q):
        u = [min(max((c + 1) / 2 * V - 0.5, 0.0), V - 1.0) for c in point]
        base = [min(int(np.floor(a)), V - 2) for a in u]
        fr = [a - b for a, b in zip(u, base)]
        for corner in range(8):
            bits = [(corner >> s) & 1 for s in (2, 1, 0)]
            w = 1.0
            for b, f in zip(bits, fr):
                w *= f if b else 1 - f
            out[n] += w * feat[base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]]
    return out


def test_devoxelize_matches_corner_oracle(rng):
    feat = rng.normal(size=(4, 4, 4, 3))
    q = rng.uniform(-1.3, 1.3, (40, 3))
    np.testing.assert_allclose(devoxelize(feat, q), _devox_oracle(feat, q), atol=1e-12)


def test_devoxelize_at_cell_centres_is_exact(rng):
    V = 4
    feat = rng.normal(size=(V, V, V, 3))
    idx = np.stack(np.meshgrid(*[np.arange(V)] * 3, indexing="ij"), -1).reshape(-1, 3)
    centres = (idx + 0.5) / V * 2 - 1
    np.testing.assert_allclose(devoxelize(feat, centres), feat.reshape(-1, 3), atol=1e-12)


def test_devoxelize_torch_agrees_with_numpy(rng):
    feat = rng.normal(size=(8, 8, 8, 3))
    q = rng.uniform(-1, 1, (20, 3))
    t = devoxelize(torch.tensor(feat), torch.tensor(q)).numpy()
    np.testing.assert_allclose(t, devoxelize(feat, q), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_devoxelize_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    f, g = r.normal(size=(2, 4, 4, 4, 3))
    q = r.uniform(-1, 1, (10, 3))
    np.testing.assert_allclose(devoxelize(a * f + b * g, q), a * devoxelize(f, q) + b * devoxelize(g, q), atol=1e-9)


def test_devoxelize_constant_field(rng):
    feat = np.broadcast_to([1.5, -2.0, 0.25], (8, 8, 8, 3)).copy()
    np.testing.assert_allclose(devoxelize(feat, rng.uniform(-2, 2, (30, 3))), np.tile([1.5, -2.0, 0.25], (30, 1)))


def test_devoxelize_rejects_nan():
    with pytest.raises(ValueError):
        devoxelize(np.zeros((2, 2, 2, 3)), np.array([[np.nan, 0, 0]]))


def test_patchify_token_layout():
    V, p = 4, 2
    feat = np.arange(V**3 * 3, dtype=float).reshape(V, V, V, 3)
    tok = patchify(feat, p)
    assert tok.shape == (8, 24)
    # token for patch (i, j, k) = (1, 0, 1); inner order is dz, dy, dx with channel last
    t = tok[1 * 4 + 0 * 2 + 1].reshape(p, p, p, 3)
    for dz in range(p):
        for dy in range(p):
            for dx in range(p):
                np.testing.assert_array_equal(t[dz, dy, dx], feat[2 + dx, 0 + dy, 2 + dz])


@pytest.mark.parametrize("V, p, L", [(32, 4, 512), (128, 4, 32768)])
def test_token_counts(V, p, L):
    assert patch_origins(V, p).shape == (L, 3)


def test_unpatchify_rejects_shape():
    with pytest.raises(ValueError):
        unpatchify(np.zeros((8, 23)), 4, 2)


@settings(max_examples=20, deadline=None)
@given(V=st.sampled_from([4, 8, 16]), p=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**16))
def test_patchify_round_trip(V, p, seed):
    feat = np.random.default_rng(seed).normal(size=(V, V, V, 3))
    back = unpatchify(patchify(feat, p), V, p)
    assert back.tobytes() == feat.tobytes()
    tf = torch.tensor(feat)
    assert torch.equal(unpatchify(patchify(tf, p), V, p), tf)


def test_point_patch_index_agrees_with_patchify(rng):
    V, p = 8, 2
    pts = rng.uniform(-1, 1, (100, 3))
    g = voxelize(pts, V)
    counts = patchify(g.count[..., None], p).sum(axis=1)
    np.testing.assert_array_equal(np.bincount(point_patch_index(pts, V, p), minlength=64), counts)


def test_cell_index_clamps():
    np.testing.assert_array_equal(cell_index(np.array([[5.0, -5.0, 0.999]]), 4), [[3, 0, 3]])


def test_grid_dump_round_trip(tmp_path, rng):
    g = voxelize(rng.uniform(-1, 1, (64, 3)), 4)
    path = tmp_path / "g.bin"
    dump_grid(path, g)
    assert path.stat().st_size == 4 + 4**3 * 3 * 4
    np.testing.assert_array_equal(load_grid_dump(path), g.feat.astype(np.float32))
