import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from detector.losses import (
    MMDKernel,
    loss_combined,
    loss_cross_entropy,
    loss_mmd,
    loss_weight_reg,
    median_bandwidth,
    mmd_with_gradients,
    one_hot,
)
from detector.network import MLPConfig, init_model


def test_one_hot_puts_attack_first():
    assert_allclose(one_hot(np.array([1, 0])), [[1.0, 0.0], [0.0, 1.0]])


def test_cross_entropy_values():
    assert loss_cross_entropy(np.array([[1.0, 0.0]]), np.array([1])) == pytest.approx(0.0)
    assert loss_cross_entropy(np.array([[0.5, 0.5]]), np.array([0])) == pytest.approx(np.log(2))
    # zero probability on the true class stays finite
    assert np.isfinite(loss_cross_entropy(np.array([[0.0, 1.0]]), np.array([1])))


def test_cross_entropy_shape_check():
    with pytest.raises(ValueError):
        loss_cross_entropy(np.ones((3, 2)) / 2, np.array([1, 0]))


def test_mean_difference_mmd():
    fs = np.array([[1.0, 0.0], [3.0, 0.0]])
    ft = np.array([[0.0, 0.0], [0.0, 0.0]])
    assert loss_mmd(fs, ft) == pytest.approx(2.0)
    assert loss_mmd(fs, fs) == 0.0


def test_gaussian_mmd_of_identical_batches_is_zero():
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(20, 3))
    assert loss_mmd(batch, batch.copy(), MMDKernel.GAUSSIAN) == 0.0


def test_gaussian_mmd_separates_shifted_batches():
    rng = np.random.default_rng(2)
    near = loss_mmd(rng.normal(size=(50, 3)), rng.normal(size=(50, 3)), MMDKernel.GAUSSIAN)
    far = loss_mmd(rng.normal(size=(50, 3)), rng.normal(loc=3.0, size=(50, 3)), MMDKernel.GAUSSIAN)
    assert far > near >= 0.0


def test_gaussian_mmd_feature_gradient():
    rng = np.random.default_rng(3)
    fs, ft = rng.normal(size=(5, 2)), rng.normal(loc=3.0, size=(4, 2))
    value, grad_s, _ = mmd_with_gradients(fs, ft, MMDKernel.GAUSSIAN, bandwidth=1.5)
    assert value > 0
    eps = 1e-6
    bumped = fs.copy()
    bumped[2, 1] += eps
    up = loss_mmd(bumped, ft, MMDKernel.GAUSSIAN, 1.5)
    bumped[2, 1] -= 2 * eps
    down = loss_mmd(bumped, ft, MMDKernel.GAUSSIAN, 1.5)
    assert grad_s[2, 1] == pytest.approx((up - down) / (2 * eps), rel=1e-5)


def test_gaussian_mmd_gradient_follows_the_median_bandwidth():
    rng = np.random.default_rng(4)
    fs, ft = rng.normal(size=(6, 3)), rng.normal(loc=2.0, size=(5, 3))
    value, grad_s, grad_t = mmd_with_gradients(fs, ft, MMDKernel.GAUSSIAN)
    assert value > 0
    eps = 1e-6
    for batch, grad in ((fs, grad_s), (ft, grad_t)):
        numeric = np.zeros_like(batch)
        for idx in np.ndindex(batch.shape):
            original = batch[idx]
            batch[idx] = original + eps
            up = loss_mmd(fs, ft, MMDKernel.GAUSSIAN)
            batch[idx] = original - eps
            down = loss_mmd(fs, ft, MMDKernel.GAUSSIAN)
            batch[idx] = original
            numeric[idx] = (up - down) / (2 * eps)
        assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


def test_median_bandwidth_of_an_even_count():
    points = np.array([[0.0], [1.0], [2.0], [3.0]])
    # squared distances 1, 4, 9, 1, 4, 1 -> median of [1, 1, 1, 4, 4, 9] is 2.5
    assert median_bandwidth(points[:2], points[2:]) == pytest.approx(2.5)


@settings(max_examples=50, deadline=None)
@given(
    fs=arrays(np.float64, (6, 3), elements=st.floats(-5, 5)),
    ft=arrays(np.float64, (4, 3), elements=st.floats(-5, 5)),
)
def test_mmd_is_non_negative(fs, ft):
    assert loss_mmd(fs, ft) >= 0.0
    assert loss_mmd(fs, ft, MMDKernel.GAUSSIAN) >= 0.0


def test_mmd_rejects_mismatched_batches():
    with pytest.raises(ValueError):
        loss_mmd(np.zeros((3, 2)), np.zeros((3, 4)))


def test_weight_regularizer_range():
    model = init_model(MLPConfig(input_dim=4, hidden_layers=2, hidden_width=5, mmd_depth=1), seed=0)
    value = loss_weight_reg(model)
    assert 0.0 < value < 1.0
    assert value == pytest.approx(np.exp(-np.linalg.norm(model.params["W0"])))
    for name in model.theta_j():
        model.params[name][:] = 0.0
    assert loss_weight_reg(model) == 1.0


def test_combined_loss():
    assert loss_combined(1.0, 2.0, 0.5, lam=0.1, mu=2.0) == pytest.approx(2.2)
    with pytest.raises(ValueError):
        loss_combined(1.0, 2.0, 0.5, lam=-0.1, mu=0.0)
