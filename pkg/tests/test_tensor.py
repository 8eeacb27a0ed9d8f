import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdnet.tensor import (
    ShapeError,
    Tensor,
    activation,
    adaptive_avg_pool2d,
    batch_norm,
    bilinear_resize,
    concat,
    conv2d,
    depthwise_conv2d,
    gradcheck,
    log_softmax_channel,
    sample_points_bilinear,
    scatter_points,
    softmax_channel,
    take_channel,
)

F64 = np.float64
SEEDS = range(20)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def rand(rng, *shape):
    return t64(rng.standard_normal(shape))


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Generic scalar functional so that every output element carries a distinct weight."""
    weights = np.random.default_rng(10_000 + seed).standard_normal(out.shape)
    return (out * weights).sum()


# -- conv2d --------------------------------------------------------------------


def test_conv2d_pointwise_scaling():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    out = conv2d(x, w, Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_direct_sum():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 10.0


def _conv_oracle(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[a, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = conv2d(t64(x), t64(w), t64(b), stride, pad)
    np.testing.assert_allclose(out.data, _conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    x, w, b = rand(rng, 2, 3, 5, 5), rand(rng, 2, 3, k, k), rand(rng, 2)
    res = gradcheck(lambda: weighted_sum(conv2d(x, w, b, stride, pad), seed), [x, w, b])
    assert res.ok(1e-4), res


def test_conv2d_gradient_of_plain_sum():
    rng = np.random.default_rng(3)
    x, w = rand(rng, 1, 2, 4, 4), rand(rng, 3, 2, 3, 3)
    res = gradcheck(lambda: conv2d(x, w, None, 1, 1).sum(), [x, w])
    assert res.ok(1e-4)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_rejects_empty_output():
    with pytest.raises(ShapeError, match="non-positive"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- depthwise -------------------------------------------------------------------


def test_depthwise_per_channel_scaling():
    x = np.stack([np.ones((2, 2)), np.full((2, 2), 2.0)])[None]
    w = np.array([3.0, 5.0]).reshape(2, 1, 1, 1)
    out = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), 3.0))
    np.testing.assert_array_equal(out.data[0, 1], np.full((2, 2), 10.0))


def test_depthwise_zero_kernel():
    rng = np.random.default_rng(0)
    out = depthwise_conv2d(Tensor(rng.standard_normal((1, 3, 5, 5))), Tensor(np.zeros((3, 1, 3, 3))), None, 1, 1)
    assert not out.data.any()


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_matches_grouped_oracle(seed):
    rng = np.random.default_rng(seed)
    stride, pad = int(rng.choice([1, 2])), int(rng.integers(0, 2))
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((3, 1, 3, 3))
    b = rng.standard_normal(3)
    out = depthwise_conv2d(t64(x), t64(w), t64(b), stride, pad).data
    for c in range(3):
        ref = _conv_oracle(x[:, c : c + 1], w[c : c + 1], b[c : c + 1], stride, pad)
        np.testing.assert_allclose(out[:, c : c + 1], ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_gradcheck(seed):
    rng = np.random.default_rng(seed)
    stride, pad = int(rng.choice([1, 2])), int(rng.integers(0, 2))
    x, w, b = rand(rng, 2, 3, 5, 5), rand(rng, 3, 1, 3, 3), rand(rng, 3)
    res = gradcheck(lambda: weighted_sum(depthwise_conv2d(x, w, b, stride, pad), seed), [x, w, b])
    assert res.ok(1e-4), res


@pytest.mark.parametrize("seed", range(5))
def test_depthwise_channel_isolation(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 6, 6))
    w = Tensor(rng.standard_normal((4, 1, 3, 3)))
    base = depthwise_conv2d(Tensor(x), w, None, 1, 1).data
    c = int(rng.integers(0, 4))
    x2 = x.copy()
    x2[0, c] += rng.standard_normal((6, 6))
    moved = depthwise_conv2d(Tensor(x2), w, None, 1, 1).data
    changed = np.abs(moved - base).reshape(4, -1).max(axis=1) > 0
    assert changed.tolist() == [i == c for i in range(4)]


# -- batch norm ------------------------------------------------------------------


def test_batch_norm_identity_on_normalized_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(out.data, x, atol=1e-3)


def test_batch_norm_zero_scale():
    rng = np.random.default_rng(1)
    beta = np.array([0.5, -1.0])
    out = batch_norm(Tensor(rng.standard_normal((2, 2, 3, 3))), Tensor(np.zeros(2)), Tensor(beta), np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], (2, 2, 3, 3)), atol=1e-7)


def test_batch_norm_running_state_update_and_eval():
    x = np.arange(16, dtype=F64).reshape(2, 2, 2, 2)
    rm, rv = np.zeros(2), np.ones(2)
    batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, True, momentum=0.1)
    mean = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var_unbiased)
    out = batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, False)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_batch_norm_rejects_single_element():
    with pytest.raises(ValueError, match="N\\*H\\*W"):
        batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x, g, b = rand(rng, 2, 3, 3, 3), rand(rng, 3), rand(rng, 3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

    def fn():
        return weighted_sum(batch_norm(x, g, b, rm.copy(), rv.copy(), training), seed)

    assert gradcheck(fn, [x, g, b]).ok(1e-4)


# -- activations ------------------------------------------------------------------


def test_relu_and_relu6_values():
    np.testing.assert_array_equal(activation(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])
    np.testing.assert_array_equal(activation(Tensor([7.0]), "relu6").data, [6])


def test_relu_subgradient_at_zero():
    x = t64([0.0, 1.0])
    activation(x, "relu").sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["relu", "relu6"])
def test_activation_gradcheck_away_from_kinks(seed, kind):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-8, 8, (2, 2, 3, 3))
    v[np.abs(v) < 0.1] += 0.5
    v[np.abs(v - 6) < 0.1] += 0.5
    x = t64(v)
    res = gradcheck(lambda: weighted_sum(activation(x, kind), seed), [x])
    assert res.ok(1e-4) and res.skipped_kinks == 0


# -- pooling and resizing ------------------------------------------------------------


def test_adaptive_pool_global_mean():
    x = np.arange(16, dtype=F64).reshape(1, 1, 4, 4)
    assert adaptive_avg_pool2d(t64(x), 1, 1).item() == pytest.approx(x.mean())


def test_adaptive_pool_quadrants():
    x = np.arange(1, 17, dtype=F64).reshape(1, 1, 4, 4)
    np.testing.assert_allclose(adaptive_avg_pool2d(t64(x), 2, 2).data[0, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_adaptive_pool_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 3))
    np.testing.assert_allclose(adaptive_avg_pool2d(t64(x), 5, 3).data, x)


def test_adaptive_pool_rejects_oversize():
    with pytest.raises(ShapeError):
        adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 4, 4))), 5, 2)


def _pool_oracle(x, oh, ow):
    h, w = x.shape[2:]
    out = np.zeros(x.shape[:2] + (oh, ow))
    for i in range(oh):
        for j in range(ow):
            r0, r1 = (i * h) // oh, math.ceil((i + 1) * h / oh)
            c0, c1 = (j * w) // ow, math.ceil((j + 1) * w / ow)
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


@pytest.mark.parametrize("seed", SEEDS)
def test_adaptive_pool_window_oracle_and_gradcheck(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    oh, ow = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    x = rand(rng, 2, 2, h, w)
    np.testing.assert_allclose(adaptive_avg_pool2d(x, oh, ow).data, _pool_oracle(x.data, oh, ow), rtol=1e-12)
    assert gradcheck(lambda: weighted_sum(adaptive_avg_pool2d(x, oh, ow), seed), [x]).ok(1e-4)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_adaptive_pool_preserves_mean_when_dividing(oh, ow, fy, fx, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, oh * fy, ow * fx))
    out = adaptive_avg_pool2d(t64(x), oh, ow).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-12)


def test_bilinear_constant_preserved():
    x = np.full((1, 2, 3, 5), 0.7)
    up = bilinear_resize(t64(x), 11, 7)
    np.testing.assert_allclose(up.data, 0.7)
    np.testing.assert_allclose(bilinear_resize(up, 3, 5).data, 0.7)


def test_bilinear_half_pixel_convention():
    x = t64(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(bilinear_resize(x, 1, 4).data[0, 0, 0], [0.0, 0.5, 1.5, 2.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 2, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    assert gradcheck(lambda: weighted_sum(bilinear_resize(x, oh, ow), seed), [x]).ok(1e-4)


# -- points ---------------------------------------------------------------------------


def test_sample_constant_map():
    x = t64(np.full((1, 3, 4, 6), 2.5))
    coords = np.random.default_rng(0).uniform(0, 1, (1, 9, 2))
    np.testing.assert_allclose(sample_points_bilinear(x, coords).data, 2.5)


def test_sample_pixel_centres_are_nodes():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 5))
    ii, jj = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    coords = np.stack([(jj.ravel() + 0.5) / 5, (ii.ravel() + 0.5) / 4], axis=-1)[None]
    out = sample_points_bilinear(t64(x), coords).data
    np.testing.assert_allclose(out, x.reshape(1, 2, -1), atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_sample_closed_form_on_2x2(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((2, 2))
    u, v = rng.uniform(0.25, 0.75, 2)  # interior: between the four pixel centres
    fx, fy = 2 * u - 0.5, 2 * v - 0.5
    expect = m[0, 0] * (1 - fx) * (1 - fy) + m[0, 1] * fx * (1 - fy) + m[1, 0] * (1 - fx) * fy + m[1, 1] * fx * fy
    got = sample_points_bilinear(t64(m.reshape(1, 1, 2, 2)), np.array([[[u, v]]])).data
    assert got.item() == pytest.approx(expect, abs=1e-12)


def test_sample_rejects_out_of_range():
    with pytest.raises(ValueError):
        sample_points_bilinear(Tensor(np.zeros((1, 1, 2, 2))), np.array([[[1.2, 0.5]]]))


def test_sample_resolution_invariance_on_constant():
    coords = np.array([[[0.3, 0.8], [0.95, 0.01]]])
    a = sample_points_bilinear(t64(np.full((1, 1, 3, 3), 4.0)), coords).data
    b = sample_points_bilinear(t64(np.full((1, 1, 17, 9), 4.0)), coords).data
    np.testing.assert_allclose(a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_sample_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 3, 4, 5)
    coords = rng.uniform(0, 1, (2, 6, 2))
    coords[0, 0] = coords[0, 1]  # repeated point accumulates gradient twice
    assert gradcheck(lambda: weighted_sum(sample_points_bilinear(x, coords), seed), [x]).ok(1e-4)


def _centres(pix, h, w):
    pix = np.asarray(pix)
    return np.stack([(pix[:, 1] + 0.5) / w, (pix[:, 0] + 0.5) / h], axis=-1)[None]


def test_scatter_empty_set_unchanged():
    dst = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    out = scatter_points(t64(dst), np.zeros((1, 0, 2)), t64(np.zeros((1, 2, 0))))
    np.testing.assert_array_equal(out.data, dst)


def test_scatter_single_point_support():
    dst = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    out = scatter_points(t64(dst), _centres([(1, 2)], 4, 4), t64(np.full((1, 3, 1), 9.0)))
    assert np.count_nonzero(out.data != dst) == 3
    np.testing.assert_array_equal(out.data[0, :, 1, 2], 9.0)


def test_scatter_duplicates_last_writer_wins():
    rng = np.random.default_rng(2)
    dst = rng.standard_normal((1, 2, 3, 3))
    pix = [(0, 0), (1, 1), (0, 0), (2, 1), (1, 1)]
    vals = rng.standard_normal((1, 2, 5))
    replay = dst.copy()
    for p, (i, j) in enumerate(pix):
        replay[0, :, i, j] = vals[0, :, p]
    out = scatter_points(t64(dst), _centres(pix, 3, 3), t64(vals))
    np.testing.assert_array_equal(out.data, replay)


def test_scatter_then_read_back():
    rng = np.random.default_rng(4)
    pix = [(0, 3), (2, 1), (3, 3)]
    coords = _centres(pix, 4, 4)
    vals = rng.standard_normal((1, 2, 3))
    out = scatter_points(t64(rng.standard_normal((1, 2, 4, 4))), coords, t64(vals))
    np.testing.assert_array_equal(sample_points_bilinear(out, coords).data, vals)


def test_scatter_out_of_range():
    with pytest.raises(IndexError):
        scatter_points(t64(np.zeros((1, 1, 2, 2))), np.array([[[1.0, 0.5]]]), t64(np.zeros((1, 1, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_scatter_gradcheck(seed):
    rng = np.random.default_rng(seed)
    dst = rand(rng, 2, 2, 4, 4)
    pix = rng.integers(0, 4, (5, 2))
    coords = np.concatenate([_centres(pix, 4, 4)] * 2)
    vals = rand(rng, 2, 2, 5)
    assert gradcheck(lambda: weighted_sum(scatter_points(dst, coords, vals), seed), [dst, vals]).ok(1e-4)


# -- softmax ------------------------------------------------------------------------


def test_softmax_values():
    np.testing.assert_allclose(softmax_channel(t64(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_channel(t64(np.log([[1.0, 3.0]]))).data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_shift_invariance():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(softmax_channel(t64(x)).data, softmax_channel(t64(x + 5.0)).data, atol=1e-14)


@given(st.integers(0, 10_000), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_softmax_sums_to_one(seed, scale):
    x = np.random.default_rng(seed).standard_normal((2, 3, 3, 3)) * scale
    s = softmax_channel(Tensor(x.astype(np.float32))).data
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-6)
    assert np.all((s >= 0) & (s <= 1))


def test_softmax_moderate_logits_strictly_inside_unit_interval():
    s = softmax_channel(Tensor(np.random.default_rng(0).uniform(-10, 10, (2, 3, 4, 4)))).data
    assert np.all((s > 0) & (s < 1))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_and_log_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 3, 2, 2)
    assert gradcheck(lambda: weighted_sum(softmax_channel(x), seed), [x]).ok(1e-4)
    assert gradcheck(lambda: weighted_sum(log_softmax_channel(x), seed), [x]).ok(1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_take_channel_and_concat_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 2, 3), rand(rng, 2, 1, 3)
    idx = rng.integers(0, 3, (2, 3))
    assert gradcheck(lambda: weighted_sum(take_channel(concat([a, b], axis=1), idx), seed), [a, b]).ok(1e-4)


# -- backward -----------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = t64([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = t64([1.0, 2.0])
    loss = (x**2).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        (t64([1.0, 2.0]) * 2.0).backward()


def test_reused_tensor_gets_each_use():
    x = t64([3.0])
    (x * x + x).sum().backward()
    assert x.grad[0] == 7.0


def test_float32_default_and_float64_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    rng = np.random.default_rng(0)
    out = conv2d(rand(rng, 1, 2, 4, 4), rand(rng, 2, 2, 3, 3), None, 1, 1)
    assert out.dtype == np.float64


def test_operators_keep_finite_values_on_extreme_inputs():
    x = Tensor(np.array([[1e4, -1e4], [0.0, 88.0]], dtype=np.float32).reshape(1, 2, 2, 1).transpose(0, 1, 2, 3))
    assert np.all(np.isfinite(softmax_channel(x).data))
    assert np.all(np.isfinite(log_softmax_channel(x).data))
