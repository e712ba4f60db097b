import numpy as np
import pytest
from numpy.testing import assert_allclose

from detector.network import MLPConfig, init_model
from detector.optim import OptimizerState, adam_update, optimizer_step
from gridsim.errors import NumericalError


def test_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = OptimizerState(lr=0.01)
    adam_update(state, params, {"w": np.array([0.5, -4.0, 1e-3])})
    assert_allclose(params["w"], [0.99, -1.99, 2.99], atol=1e-6)
    assert state.step == 1


def test_minimizes_a_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    state = OptimizerState(lr=0.1)
    for _ in range(500):
        adam_update(state, params, {"w": 2.0 * params["w"]})
    assert_allclose(params["w"], 0.0, atol=5e-2)


def test_non_finite_gradient_aborts_before_update():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState(lr=0.1)
    with pytest.raises(NumericalError):
        adam_update(state, params, {"a": np.ones(2), "b": np.array([np.nan, 1.0])})
    assert_allclose(params["a"], 1.0)
    assert state.step == 0


def test_optimizer_step_counts_model_steps():
    model = init_model(MLPConfig(input_dim=3, hidden_layers=1, hidden_width=4, mmd_depth=1))
    grads = {name: np.ones_like(p) for name, p in model.params.items()}
    before = model.params["W0"].copy()
    model, state = optimizer_step(OptimizerState(lr=1e-3), model, grads)
    assert model.step == 1 and state.step == 1
    assert_allclose(model.params["W0"], before - 1e-3, atol=1e-9)


def test_invalid_learning_rate():
    with pytest.raises(ValueError):
        OptimizerState(lr=0.0)
