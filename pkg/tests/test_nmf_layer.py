import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nmfnet.core.tensor import ConvSpec, unfold
from nmfnet.errors import DegenerateFactorError, NegativeInputError, ShapeError
from nmfnet.services.classic_nmf import kl_divergence, update_h_classic
from nmfnet.services.nmf_layer import (
    NmfParams,
    cnmf_forward,
    cnmf_forward_state,
    derive_w,
    h_step,
    iterate_h,
    nmf_forward,
    nmf_forward_batched,
    normalize_input,
)


def test_derive_w_absolute_then_normalize():
    assert_allclose(derive_w(np.array([[-1.0], [1.0]])), [[0.5], [0.5]])


def test_derive_w_single_nonzero_gives_one_hot():
    U = np.array([[0.0, -3.0], [2.0, 0.0], [0.0, 0.0]])
    assert_array_equal(derive_w(U), [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])


def test_derive_w_columns_sum_to_one(rng):
    W = derive_w(rng.standard_normal((3, 7, 5)))
    assert np.all(W >= 0)
    assert_allclose(W.sum(axis=-2), 1.0, atol=1e-9)


def test_derive_w_dead_column_names_index():
    with pytest.raises(DegenerateFactorError) as info:
        derive_w(np.array([[1.0, 0.0, 2.0], [1.0, 0.0, 0.0]]))
    assert info.value.index == 1


def test_normalize_input():
    out, sums = normalize_input(np.array([[2.0, 2.0], [0.0, 0.0]]))
    assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]])
    assert_array_equal(sums, [4.0, 0.0])
    out, _ = normalize_input(np.zeros(3))
    assert_allclose(out, [1 / 3] * 3)
    with pytest.raises(NegativeInputError):
        normalize_input(np.array([1.0, -0.5]))


def test_h_step_single_latent_fixed_point(rng):
    x, _ = normalize_input(rng.uniform(0.1, 1.0, (4, 5)))
    W = derive_w(rng.uniform(0.1, 1.0, (5, 1)))
    assert_allclose(h_step(x, W, np.ones((4, 1))), 1.0, rtol=1e-12)


def test_h_step_exact_reconstruction_is_fixed(rng):
    W = derive_w(rng.uniform(0.1, 1.0, (6, 3)))
    h = rng.uniform(0.1, 1.0, (4, 3))
    for epsilon in (1.0, 0.5):
        assert_allclose(h_step(h @ W.T, W, h, epsilon), h, rtol=1e-12)


def test_h_step_matches_classic_update(rng):
    for _ in range(200):
        S, I = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        x, _ = normalize_input(rng.uniform(0.0, 1.0, (3, S)))
        W = derive_w(rng.uniform(0.1, 1.0, (S, I)))
        h = rng.uniform(0.1, 1.0, (3, I))
        assert_allclose(h_step(x, W, h, 1.0), update_h_classic(x, W, h), rtol=1e-10)


def test_nmf_forward_requires_an_iteration(rng):
    with pytest.raises(ShapeError):
        nmf_forward(rng.uniform(size=(2, 3)), derive_w(rng.uniform(size=(3, 2))), n_iters=0)


def test_nmf_forward_rejects_mismatched_weight(rng):
    with pytest.raises(ShapeError, match="patch length"):
        nmf_forward(rng.uniform(size=(2, 3)), derive_w(rng.uniform(size=(4, 2))), n_iters=1)


def test_nmf_forward_keeps_only_the_last_step(rng):
    x = rng.uniform(0.0, 1.0, (4, 6))
    params = NmfParams.init(6, 3, rng)
    state = nmf_forward(x, params, n_iters=5, epsilon=1.0)
    assert_allclose(state.h, h_step(state.x_norm, params.W, state.h_prev), rtol=1e-14)
    assert_allclose(state.x_scale, x.sum(axis=1))
    assert state.h.shape == state.h_prev.shape == (4, 3)
    assert state.R.shape == (4, 6)


def test_nmf_forward_converges_on_representable_input(rng):
    W = derive_w(rng.uniform(0.1, 1.0, (8, 3)))
    h_star = rng.uniform(0.1, 1.0, (1, 3))
    x = h_star @ W.T
    x_norm, _ = normalize_input(x)
    divergences = [kl_divergence(x_norm, W, nmf_forward(x, W, n, 1.0).h) for n in (1, 5, 20, 80)]
    assert all(b <= a + 1e-12 for a, b in zip(divergences, divergences[1:]))
    assert divergences[-1] < divergences[0]


def test_h_stays_non_negative_and_on_simplex(rng):
    x, _ = normalize_input(rng.uniform(0.0, 1.0, (10, 7)))
    W = derive_w(rng.standard_normal((7, 4)))
    for h in iterate_h(x, W, 100, epsilon=1.0):
        assert np.all(h >= 0)
        assert_allclose(h.sum(axis=1), 1.0, atol=1e-9)
    for h in iterate_h(x, W, 20, epsilon=0.5):
        assert np.all(h >= 0)


def test_batched_forward_matches_sequential(rng):
    x = rng.uniform(0.0, 1.0, (7, 5, 6))
    W = derive_w(rng.uniform(0.1, 1.0, (6, 3)))
    a = nmf_forward_batched(x, W, 4, 1.0, workers=1)
    b = nmf_forward_batched(x, W, 4, 1.0, workers=3)
    assert_allclose(b.h, a.h, rtol=1e-12)
    assert_allclose(b.R, a.R, rtol=1e-12)


def test_cnmf_single_latent_per_group_outputs_ones(rng):
    spec = ConvSpec(kernel_h=1, kernel_w=1, groups=3, in_channels=3, out_channels=3)
    params = NmfParams.init(1, 1, rng, groups=3)
    out = cnmf_forward(rng.uniform(0.1, 1.0, (2, 3, 4, 4)), params, spec, n_iters=5, epsilon=1.0)
    assert out.shape == (2, 3, 4, 4)
    assert_allclose(out, 1.0, rtol=1e-12)


def test_cnmf_full_window_is_dense_nmf(rng):
    spec = ConvSpec(kernel_h=3, kernel_w=3, in_channels=2, out_channels=4)
    params = NmfParams.init(18, 4, rng, groups=1)
    x = rng.uniform(0.0, 1.0, (3, 2, 3, 3))
    out = cnmf_forward(x, params, spec, n_iters=6, epsilon=1.0)
    dense = nmf_forward(x.reshape(3, -1), params.W[0], 6, 1.0).h
    assert_allclose(out[:, :, 0, 0], dense, rtol=1e-12)


def test_cnmf_matches_per_position_oracle(rng):
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=2, padding=1, groups=2, in_channels=4, out_channels=6)
    params = NmfParams.init(spec.patch_size, spec.out_per_group, rng, groups=2)
    x = rng.uniform(0.0, 1.0, (2, 4, 8, 8))
    out = cnmf_forward_state(x, params, spec, n_iters=5, epsilon=1.0, workers=2).output

    patches = unfold(x, spec)
    k, o = spec.patch_size, spec.out_per_group
    ho, wo = spec.output_size(8, 8)
    for b in range(2):
        for pos in range(ho * wo):
            for g in range(2):
                h = nmf_forward(patches[b, pos, g * k : (g + 1) * k], params.W[g], 5, 1.0).h
                assert_allclose(out[b, g * o : (g + 1) * o, pos // wo, pos % wo], h, rtol=1e-10)


def test_cnmf_rejects_negative_input_and_bad_weights(rng):
    spec = ConvSpec(kernel_h=1, kernel_w=1, in_channels=2, out_channels=2)
    params = NmfParams.init(2, 2, rng, groups=1)
    with pytest.raises(NegativeInputError):
        cnmf_forward(-np.ones((1, 2, 2, 2)), params, spec, n_iters=1)
    with pytest.raises(ShapeError, match="CNMF U"):
        cnmf_forward(np.ones((1, 2, 2, 2)), NmfParams.init(2, 2, rng), spec, n_iters=1)


def test_power_of_two_column_scale_is_bit_identical(rng):
    U = rng.uniform(0.1, 1.0, (6, 4))
    scaled = U.copy()
    scaled[:, 2] *= 4.0
    scaled[:, 1] *= -0.25
    assert_array_equal(derive_w(scaled), derive_w(U))
    x = rng.uniform(0.05, 1.0, (3, 6))
    assert_array_equal(nmf_forward(x, derive_w(scaled), 20, 1.0).h, nmf_forward(x, derive_w(U), 20, 1.0).h)


def test_general_column_scale_within_rounding(rng):
    U = rng.uniform(0.1, 1.0, (6, 4))
    scaled = U.copy()
    scaled[:, 0] *= 3.7
    scaled[:, 3] *= -0.3
    assert_allclose(derive_w(scaled), derive_w(U), rtol=0, atol=1e-15)
