import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scaleaware import gradcheck as G
from scaleaware import layers as L
from scaleaware.sam import SamParams, sam_backward, sam_forward, sam_init, sampling_map
from scaleaware.tensor import Rng, ShapeError


def zero_sam(c, h, w):
    p = sam_init(c, h, w, Rng(0))
    for conv in p.convs():
        conv.weight[...] = 0.0
    return p


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_base_grid_corners():
    p = sam_init(2, 4, 6, Rng(0))
    g = p.base_grid
    assert tuple(g[0, :, 0, 0]) == (-1.0, -1.0)
    assert tuple(g[0, :, 3, 5]) == (1.0, 1.0)
    assert tuple(g[0, :, 0, 5]) == (1.0, -1.0)


def test_base_grid_centre():
    g = sam_init(1, 3, 3, Rng(0)).base_grid
    assert tuple(g[0, :, 1, 1]) == (0.0, 0.0)


def test_base_grid_formula():
    h, w = 5, 7
    g = sam_init(1, h, w, Rng(0)).base_grid
    i, j = np.mgrid[0:h, 0:w]
    np.testing.assert_array_equal(g[0, 0], 2 * j / (w - 1) - 1)
    np.testing.assert_array_equal(g[0, 1], 2 * i / (h - 1) - 1)


def test_init_statistics_and_no_bias():
    p = sam_init(64, 8, 8, Rng(4))
    w = np.concatenate([p.conv_a.weight.ravel(), p.conv_b.weight.ravel()])
    assert p.conv_a.bias is None and p.conv_b.bias is None
    assert p.conv_a.weight.shape == (2, 64, 3, 3)
    assert abs(w.std() - 1e-3) < 1e-4 and abs(w.mean()) < 1e-4


def test_init_zero_std_gives_zero_offsets(rng):
    p = sam_init(3, 5, 5, rng, std=0.0)
    pre, _ = sampling_map(rng.normal(0, 1, (1, 3, 5, 5)), p)
    np.testing.assert_array_equal(pre, p.base_grid)


@pytest.mark.parametrize("h,w", [(1, 4), (4, 1)])
def test_degenerate_size_rejected(h, w):
    with pytest.raises(ShapeError):
        sam_init(2, h, w, Rng(0))


def test_zero_offsets_closed_form(rng):
    x = rng.uniform(-3, 3, (2, 3, 6, 5))
    out, _ = sam_forward(x, zero_sam(3, 6, 5))
    np.testing.assert_allclose(out, x * (1 + sigmoid(x)), atol=1e-12, rtol=0)


def test_zero_feature_stays_zero():
    out, _ = sam_forward(np.zeros((1, 2, 4, 4)), zero_sam(2, 4, 4))
    assert not out.any()


def test_fresh_init_offsets_bounded(rng):
    x = rng.uniform(-1, 1, (1, 8, 16, 16))
    p = sam_init(8, 16, 16, rng)
    pre, _ = sampling_map(x, p)
    offsets = pre - p.base_grid
    for ch in range(2):
        bound = (np.abs(p.conv_a.weight[ch]).sum() + np.abs(p.conv_b.weight[ch]).sum()) * np.abs(x).max()
        assert np.abs(offsets[:, ch]).max() <= bound
    # under half a pixel step (2 / 15 in normalized units)
    assert np.abs(offsets).max() < 0.5 * 2 / 15


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        sam_forward(np.zeros((1, 2, 4, 5)), sam_init(2, 4, 4, rng))


@given(st.floats(1.0, 1e4), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_clamp_invariant(scale, seed):
    r = Rng(seed)
    p = sam_init(3, 6, 6, r, std=0.5)
    for conv in p.convs():
        conv.weight *= scale
    x = r.uniform(-1, 1, (1, 3, 6, 6))
    _, tape = sam_forward(x, p)
    grid = tape.saved["grid"]
    assert grid.min() >= -1.0 and grid.max() <= 1.0


def test_backward_zero_grad(rng):
    x, p = G.sam_case(rng)
    _, tape = sam_forward(x, p)
    gx = sam_backward(np.zeros_like(x), tape, p)
    assert not gx.any() and not p.conv_a.grad_weight.any() and not p.conv_b.grad_weight.any()


def test_backward_identity_limit(rng):
    x = rng.uniform(-2, 2, (1, 3, 5, 5))
    p = zero_sam(3, 5, 5)
    g = rng.normal(0, 1, x.shape)
    _, tape = sam_forward(x, p)
    gx = sam_backward(g, tape, p, map_grad=False)
    s = sigmoid(x)
    np.testing.assert_allclose(gx, g * (1 + s + x * s * (1 - s)), atol=1e-12)


def test_backward_finite_difference():
    res = G.check_sam(Rng(21), probes=50, tol=1e-4)
    assert res.passed and res.probes >= 50, res.line()


def test_map_path_matters():
    """Dropping the coordinate path must break the finite-difference match."""
    r = Rng(21)
    x, p = G.sam_case(r)
    out, tape = sam_forward(x, p)
    proj = r.normal(0, 1, out.shape)
    sam_backward(proj, tape, p, map_grad=False)
    f = lambda: float((sam_forward(x, p)[0] * proj).sum())
    err, _, _ = G.compare(f, [(p.conv_a.weight, p.conv_a.grad_weight)], r, 20)
    assert err > 0.5


def test_residual_keeps_gradient_flowing(rng):
    x, p = G.sam_case(rng)
    g = rng.normal(0, 1, x.shape)
    _, tape = sam_forward(x, p)
    assert np.any(sam_backward(g, tape, p) != 0)


def test_tape_reuse(rng):
    x, p = G.sam_case(rng)
    out, tape = sam_forward(x, p)
    sam_backward(out, tape, p)
    with pytest.raises(L.TapeError):
        sam_backward(out, tape, p)
