import numpy as np
import pytest

from spheremoe import grad as G
from spheremoe.errors import ConfigError, DegenerateInputError, ShapeError
from spheremoe.grad import Tensor, grad_check
from spheremoe.mesh import SENTINEL, build_hierarchy
from spheremoe.roi import RoiMask, cap_roi
from spheremoe.sconv import (
    SphConvLayer, SurfaceField, pool_mean, shuffled_mesh, sph_conv, sph_downconv,
)

H = build_hierarchy(3)


def loop_conv(dense, kernel, bias, table, in_sel, out_idx):
    """Per-vertex loop over the 7 kernel slots, written without the gather plan."""
    out = []
    for v in out_idx:
        acc = bias.copy()
        slots = [v] + [v if u == SENTINEL else u for u in table[v]]
        for s, u in enumerate(slots):
            val = dense[u] if in_sel[u] else np.zeros(dense.shape[1])
            acc = acc + kernel[:, :, s] @ val
        out.append(acc)
    return np.array(out)


def layer64(cin, cout, seed=0, rf="ring"):
    layer = SphConvLayer(cin, cout, np.random.default_rng(seed), "f64", rf)
    layer.bias.data[:] = np.random.default_rng(seed + 1).normal(size=cout)
    return layer


def test_constant_field_all_ones_kernel_gives_seven():
    mesh = H[2]
    mask = RoiMask.full(2, "L")
    layer = SphConvLayer(1, 1, dtype="f64")
    layer.kernel.data[:] = 1.0
    x = SurfaceField.from_dense(np.ones(mesh.n_vertices), mask, "f64")
    y = sph_conv(x, layer, mesh, mask).values.data[:, 0]
    # pentagon vertices duplicate the centre into their missing slot
    assert np.all(y == 7.0)


def test_roi_boundary_reads_zero():
    mesh = H[2]
    mask = cap_roi(2, "L", 20)
    layer = SphConvLayer(1, 1, dtype="f64")
    layer.kernel.data[:] = 1.0
    x = SurfaceField.from_dense(np.ones(mesh.n_vertices), mask, "f64")
    y = sph_conv(x, layer, mesh, mask).values.data[:, 0]
    for row, v in enumerate(mask.indices):
        ring = mesh.neighbors[v]
        expected = 1 + sum(1 for u in ring if u != SENTINEL and mask.selected[u])
        expected += sum(1 for u in ring if u == SENTINEL)  # centre duplicate, always in ROI
        assert y[row] == expected
    assert y.min() < 7  # some vertex sits on the boundary


@pytest.mark.parametrize("level", [1, 2, 3])
def test_matches_per_vertex_loop(level):
    mesh = H[level]
    rng = np.random.default_rng(level)
    mask = cap_roi(level, "R", mesh.n_vertices // 3)
    dense = rng.normal(size=(mesh.n_vertices, 3))
    layer = layer64(3, 2, seed=level)
    y = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, mesh, mask).values.data
    ref = loop_conv(dense, layer.kernel.data, layer.bias.data, mesh.neighbors, mask.selected, mask.indices)
    assert np.allclose(y, ref, atol=1e-12)


def test_pentagon_vertex_uses_centre_for_missing_slot():
    mesh = H[1]
    assert (mesh.neighbors[0] == SENTINEL).sum() == 1
    mask = RoiMask.full(1, "L")
    dense = np.zeros((mesh.n_vertices, 1))
    dense[0] = 1.0
    layer = SphConvLayer(1, 1, dtype="f64")
    slot = 1 + int(np.flatnonzero(mesh.neighbors[0] == SENTINEL)[0])
    layer.kernel.data[:] = 0.0
    layer.kernel.data[0, 0, slot] = 1.0
    y = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, mesh, mask).values.data
    assert y[0, 0] == 1.0


def test_downconv_matches_loop_on_fine_ring():
    fine, coarse_level = H[3], 2
    rng = np.random.default_rng(4)
    fmask = cap_roi(3, "L", 200)
    cmask = RoiMask(coarse_level, fmask.hemisphere, fmask.selected[: H[2].n_vertices].copy())
    dense = rng.normal(size=(fine.n_vertices, 2))
    layer = layer64(2, 3, seed=5)
    y = sph_downconv(SurfaceField.from_dense(dense, fmask, "f64"), layer, H, cmask).values.data
    ref = loop_conv(dense, layer.kernel.data, layer.bias.data, fine.neighbors, fmask.selected, cmask.indices)
    assert np.allclose(y, ref, atol=1e-12)


def test_mean_pool_downsample_averages_in_roi_support():
    fine = H[2]
    fmask = RoiMask.full(2, "L")
    cmask = RoiMask.full(1, "L")
    dense = np.arange(fine.n_vertices, dtype=float)[:, None]
    layer = SphConvLayer(1, 1, dtype="f64")
    layer.kernel.data[:] = 0.0
    layer.kernel.data[0, 0, 0] = 1.0
    y = sph_downconv(SurfaceField.from_dense(dense, fmask, "f64"), layer, H, cmask, mode="mean_pool")
    v = 0
    ring = [u for u in fine.neighbors[v] if u != SENTINEL]
    members = [v, v] + ring  # the sentinel slot reads the centre again
    assert y.values.data[v, 0] == pytest.approx(np.mean(dense[members, 0]))
    with pytest.raises(ConfigError):
        sph_downconv(SurfaceField.from_dense(dense, fmask, "f64"), layer, H, cmask, mode="max")


def test_batched_equals_stacked_unbatched():
    mesh = H[2]
    mask = cap_roi(2, "L", 60)
    rng = np.random.default_rng(0)
    dense = rng.normal(size=(mesh.n_vertices, 4, 3))
    layer = layer64(3, 5)
    yb = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, mesh, mask).values.data
    for b in range(4):
        y = sph_conv(SurfaceField.from_dense(dense[:, b], mask, "f64"), layer, mesh, mask).values.data
        assert np.allclose(yb[:, b], y, atol=1e-12)


def test_center_only_is_pointwise():
    mesh = H[2]
    mask = RoiMask.full(2, "R")
    dense = np.random.default_rng(1).normal(size=(mesh.n_vertices, 2))
    layer = layer64(2, 3, rf="center_only")
    y = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, mesh, mask).values.data
    assert np.allclose(y, dense @ layer.kernel.data[:, :, 0].T + layer.bias.data)


def test_dense_round_trip():
    mask = cap_roi(2, "L", 30)
    dense = np.random.default_rng(2).normal(size=(162, 2))
    f = SurfaceField.from_dense(dense, mask)
    back = f.to_dense()
    assert np.allclose(back[mask.indices], dense[mask.indices])
    assert np.all(back[~mask.selected] == 0)


def test_shuffled_mesh_changes_output_and_keeps_sentinels():
    mesh = H[2]
    sh = shuffled_mesh(mesh, 7)
    assert np.array_equal(sh.neighbors == SENTINEL, mesh.neighbors == SENTINEL)
    assert not np.array_equal(sh.neighbors, mesh.neighbors)
    mask = RoiMask.full(2, "L")
    dense = np.random.default_rng(3).normal(size=(mesh.n_vertices, 1))
    layer = layer64(1, 1)
    a = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, mesh, mask).values.data
    b = sph_conv(SurfaceField.from_dense(dense, mask, "f64"), layer, sh, mask).values.data
    assert not np.allclose(a, b)


def test_errors():
    mesh = H[2]
    mask = RoiMask.full(2, "L")
    x = SurfaceField.from_dense(np.ones((162, 2)), mask)
    with pytest.raises(ShapeError):
        sph_conv(x, SphConvLayer(3, 1), mesh, mask)
    with pytest.raises(ConfigError):
        sph_conv(x, SphConvLayer(2, 1), H[1], mask)
    with pytest.raises(ConfigError):
        sph_downconv(x, SphConvLayer(2, 1), H, mask)
    with pytest.raises(ShapeError):
        SurfaceField(2, mask.hemisphere, Tensor(np.ones((5, 1))), mask)
    with pytest.raises(ConfigError):
        SphConvLayer(1, 1, receptive_field="two_ring")
    empty = SurfaceField.from_dense(np.ones((162, 1)), RoiMask.empty(2, "L"))
    with pytest.raises(DegenerateInputError):
        pool_mean(empty)


@pytest.mark.parametrize("mode", ["strided_conv", "mean_pool"])
def test_grad_check_conv_stack_f64(mode):
    rng = np.random.default_rng(9)
    fmask = cap_roi(2, "L", 50)
    cmask = RoiMask(1, fmask.hemisphere, fmask.selected[:42].copy())
    x = G.parameter(rng.normal(size=(fmask.count, 2, 2)))
    l1, l2 = layer64(2, 3, seed=1), layer64(3, 2, seed=2)
    target = Tensor(rng.normal(size=(cmask.count, 2, 2)))

    def f():
        h = sph_conv(SurfaceField(2, fmask.hemisphere, x, fmask), l1, H[2], fmask)
        h = SurfaceField(2, fmask.hemisphere, G.tanh(h.values), fmask)
        y = sph_downconv(h, l2, H, cmask, mode=mode)
        return G.mse(y.values, target)

    res = grad_check(f, [x, l1.kernel, l1.bias, l2.kernel, l2.bias])
    assert res.max_rel_err < 1e-5
