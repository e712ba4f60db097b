import numpy as np
import pytest
from numpy.testing import assert_allclose

from detector.losses import MMDKernel, backward, combined_loss
from detector.network import (
    MLPConfig,
    Mode,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from gridsim.dataset import NormStats
from gridsim.errors import DatasetFormatError, LayoutError


@pytest.fixture
def small_model():
    return init_model(MLPConfig(input_dim=4, hidden_layers=2, hidden_width=5, mmd_depth=2), seed=3)


@pytest.fixture
def batches():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(8, 4))
    xt = rng.normal(loc=0.5, size=(6, 4))
    ys = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    return xs, xt, ys


def test_layer_shapes(small_model):
    assert small_model.params["W0"].shape == (4, 5)
    assert small_model.params["W1"].shape == (5, 5)
    assert small_model.params["W_out"].shape == (5, 2)
    assert small_model.theta_j() == ["W0", "W1"]


def test_mmd_depth_bounded():
    with pytest.raises(ValueError):
        MLPConfig(input_dim=4, hidden_layers=2, mmd_depth=3)


def test_softmax_rows_sum_to_one():
    probs = softmax(np.array([[1000.0, 0.0], [-3.0, 2.0], [0.0, 0.0]]))
    assert_allclose(probs.sum(axis=1), 1.0)
    assert_allclose(probs[2], [0.5, 0.5])


def test_train_mode_standardizes_each_layer_input(small_model, batches):
    xs, _, _ = batches
    result = forward(small_model, xs, train=True, update_running=False)
    first = result.cache[0]
    assert_allclose(first.bn_out.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(first.bn_out.var(axis=0), 1.0, atol=1e-3)


def test_running_statistics_update_only_when_asked(small_model, batches):
    xs, _, _ = batches
    before = small_model.running_mean[0].copy()
    forward(small_model, xs, train=True, update_running=False)
    assert_allclose(small_model.running_mean[0], before)
    forward(small_model, xs, train=True)
    assert_allclose(small_model.running_mean[0], 0.1 * xs.mean(axis=0))


def test_eval_mode_is_deterministic_and_row_independent(small_model, batches):
    xs, _, _ = batches
    small_model.eval()
    full = forward(small_model, xs).probs
    single = forward(small_model, xs[:1]).probs
    assert_allclose(full[:1], single)
    assert_allclose(forward(small_model, xs).probs, full)


def test_width_and_batch_checks(small_model):
    with pytest.raises(LayoutError):
        forward(small_model, np.zeros((3, 7)))
    with pytest.raises(ValueError):
        forward(small_model, np.zeros((1, 4)), train=True)


@pytest.mark.parametrize(
    "kernel, bandwidth",
    [(MMDKernel.MEAN_DIFFERENCE, None), (MMDKernel.GAUSSIAN, 2.0), (MMDKernel.GAUSSIAN, None)],
)
def test_gradients_match_finite_differences(small_model, batches, kernel, bandwidth):
    xs, xt, ys = batches
    lam, mu = 0.7, 0.3
    grads, terms = backward(small_model, xs, xt, ys, lam, mu, kernel, bandwidth=bandwidth)
    assert terms.total == pytest.approx(combined_loss(small_model, xs, xt, ys, lam, mu, kernel, bandwidth).total)

    eps = 1e-6
    for name, param in small_model.params.items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + eps
            up = combined_loss(small_model, xs, xt, ys, lam, mu, kernel, bandwidth).total
            param[idx] = original - eps
            down = combined_loss(small_model, xs, xt, ys, lam, mu, kernel, bandwidth).total
            param[idx] = original
            numeric[idx] = (up - down) / (2 * eps)
        assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-7, err_msg=name)


def test_checkpoint_round_trip(tmp_path, small_model, batches):
    xs, _, _ = batches
    forward(small_model, xs, train=True)
    small_model.step = 17
    small_model.metrics = {"stage1_acc_val": 0.9}
    small_model.norm_stats = NormStats(minimum=np.zeros(4), maximum=np.ones(4))
    small_model.eval()
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")

    loaded = load_checkpoint(path)
    assert loaded.step == 17 and loaded.mode is Mode.EVAL
    assert loaded.metrics == {"stage1_acc_val": 0.9}
    assert loaded.norm_stats.same_as(small_model.norm_stats)
    assert_allclose(forward(loaded, xs).probs, forward(small_model, xs).probs)


def test_truncated_checkpoint(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetFormatError):
        load_checkpoint(path)
