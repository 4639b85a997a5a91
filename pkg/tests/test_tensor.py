import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nmfnet.core.ledger import BufferLedger, release, track
from nmfnet.core.tensor import (
    ConvSpec,
    batch_norm,
    batch_norm_backward,
    conv2d,
    conv2d_backward,
    flatten,
    fold,
    map_batch,
    matmul,
    softmax,
    unfold,
)
from nmfnet.errors import NonFiniteError, ShapeError
from nmfnet.services.gradcheck import central_difference


def naive_patches(x, k, stride, pad):
    """Nested-loop patch extractor, channel-major within a patch."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, ho * wo, c * k * k))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                window = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                out[n, i * wo + j] = window.reshape(-1)
    return out


def naive_conv(x, weight, stride, pad, groups):
    b, c, h, w = x.shape
    out_c, in_g, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out_g = out_c // groups
    y = np.zeros((b, out_c, ho, wo))
    for n in range(b):
        for o in range(out_c):
            g = o // out_g
            for i in range(ho):
                for j in range(wo):
                    window = xp[n, g * in_g : (g + 1) * in_g, i * stride : i * stride + k, j * stride : j * stride + k]
                    y[n, o, i, j] = np.sum(window * weight[o])
    return y


def test_matmul_hand_example():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_identity_and_oracle(rng):
    v = rng.standard_normal((2, 3))
    assert_array_equal(matmul(np.eye(2), v), v)

    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    assert_allclose(matmul(a, b), expected, rtol=1e-12)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError, match="inner dimensions"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_unfold_1x1_is_pixel_per_row(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    spec = ConvSpec(kernel_h=1, kernel_w=1, in_channels=3, out_channels=1)
    patches = unfold(x, spec)
    assert patches.shape == (2, 20, 3)
    for r in range(20):
        assert_array_equal(patches[:, r], x[:, :, r // 5, r % 5])


def test_unfold_full_window_is_flattened_input(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    spec = ConvSpec(kernel_h=3, kernel_w=3, in_channels=2, out_channels=1)
    patches = unfold(x, spec)
    assert patches.shape == (2, 1, 18)
    assert_array_equal(patches[:, 0], x.reshape(2, -1))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_unfold_matches_sliding_window(rng, stride, pad):
    x = rng.standard_normal((2, 3, 4, 4))
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=stride, padding=pad, in_channels=3, out_channels=1)
    assert_array_equal(unfold(x, spec), naive_patches(x, 3, stride, pad))


def test_unfold_window_larger_than_input():
    spec = ConvSpec(kernel_h=5, kernel_w=5, in_channels=1, out_channels=1)
    with pytest.raises(ShapeError, match="larger than padded input"):
        unfold(np.zeros((1, 1, 3, 3)), spec)


def test_fold_is_adjoint_of_unfold(rng):
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=2, padding=1, in_channels=2, out_channels=1)
    x = rng.standard_normal((2, 2, 5, 5))
    y = rng.standard_normal(unfold(x, spec).shape)
    assert np.sum(unfold(x, spec) * y) == pytest.approx(np.sum(x * fold(y, x.shape, spec)), rel=1e-12)


def test_fold_of_1x1_unfold_is_identity(rng):
    x = rng.standard_normal((1, 3, 4, 4))
    spec = ConvSpec(kernel_h=1, kernel_w=1, in_channels=3, out_channels=1)
    assert_array_equal(fold(unfold(x, spec), x.shape, spec), x)


def test_conv2d_channel_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    spec = ConvSpec(kernel_h=1, kernel_w=1, in_channels=3, out_channels=3)
    weight = np.eye(3).reshape(3, 3, 1, 1)
    assert_array_equal(conv2d(x, weight, spec), x)


@pytest.mark.parametrize("groups", [1, 2])
def test_conv2d_matches_nested_loops(rng, groups):
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=2, padding=1, groups=groups, in_channels=4, out_channels=6)
    x = rng.standard_normal((2, 4, 6, 6))
    weight = rng.standard_normal((6, 4 // groups, 3, 3))
    assert_allclose(conv2d(x, weight, spec), naive_conv(x, weight, 2, 1, groups), rtol=1e-10, atol=1e-12)


def test_conv2d_rejects_wrong_weight_shape():
    spec = ConvSpec(kernel_h=3, kernel_w=3, in_channels=2, out_channels=2)
    with pytest.raises(ShapeError, match="conv weight"):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((2, 1, 3, 3)), spec)


def test_groups_must_divide_channels():
    with pytest.raises(ValueError, match="groups=3"):
        ConvSpec(kernel_h=1, kernel_w=1, groups=3, in_channels=4, out_channels=6)


def test_conv2d_backward_matches_finite_differences(rng):
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=2, padding=1, groups=2, in_channels=2, out_channels=4)
    x = rng.standard_normal((2, 2, 5, 5))
    weight = rng.standard_normal((4, 1, 3, 3))
    dout = rng.standard_normal(conv2d(x, weight, spec).shape)
    objective = lambda: float(np.sum(dout * conv2d(x, weight, spec)))

    dx, dw, db = conv2d_backward(dout, unfold(x, spec), weight, spec, x.shape)
    assert_allclose(dx, central_difference(objective, x), rtol=1e-6, atol=1e-8)
    assert_allclose(dw, central_difference(objective, weight), rtol=1e-6, atol=1e-8)
    assert_allclose(db, dout.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_batch_norm_normalizes_and_backward_matches(rng):
    x = rng.standard_normal((4, 3, 2, 2)) * 3 + 1
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    mean, var = np.zeros(3), np.ones(3)
    out, cache = batch_norm(x, np.ones(3), np.zeros(3), mean, var, training=True)
    assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
    assert np.all(mean != 0)

    dout = rng.standard_normal(x.shape)
    objective = lambda: float(np.sum(dout * batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True)[0]))
    _, cache = batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True)
    dx, dgamma, dbeta = batch_norm_backward(dout, cache)
    assert_allclose(dx, central_difference(objective, x), rtol=1e-5, atol=1e-8)
    assert_allclose(dgamma, central_difference(objective, gamma), rtol=1e-5, atol=1e-8)
    assert_allclose(dbeta, dout.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_batch_norm_eval_uses_running_statistics():
    x = np.full((2, 1, 1, 1), 3.0)
    out, cache = batch_norm(x, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), training=False)
    assert cache is None
    assert_allclose(out, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5))


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.standard_normal((5, 4)) * 50, axis=1)
    assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    with pytest.raises(ShapeError):
        softmax(np.zeros((0, 3)))


def test_map_batch_is_independent_of_workers(rng):
    x = rng.standard_normal((7, 3))
    fn = lambda chunk: chunk * 2.0 + 1.0
    assert_array_equal(map_batch(fn, x, workers=3), map_batch(fn, x, workers=1))


def test_ledger_tracks_peak():
    ledger = BufferLedger()
    a, b = np.zeros(10), np.zeros(5)
    track(ledger, a, b)
    release(ledger, a)
    track(ledger, np.zeros(2))
    assert ledger.peak == 15 * 8
    assert ledger.current == 7 * 8
    track(None, a)


def test_ensure_finite_names_the_operation():
    with pytest.raises(NonFiniteError, match="softmax"):
        softmax(np.array([[np.nan, 0.0]]))


def test_flatten_keeps_batch_axis():
    x = np.arange(24.0).reshape(2, 3, 2, 2)
    flat = flatten(x)
    assert flat.shape == (2, 12)
    assert_array_equal(flat[1], np.arange(12.0, 24.0))
    with pytest.raises(ShapeError):
        flatten(np.zeros((0, 3, 1, 1)))
