import numpy as np
import pytest

from feddiffuse.errors import ConfigurationError
from feddiffuse.optim import OptimizerState, apply_update


def test_sgd_step():
    new, state = apply_update(np.array([1.0]), np.array([2.0]), OptimizerState.create("sgd", 0.1, 1))
    np.testing.assert_allclose(new, [0.8])
    assert state.step == 1


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_is_noop(kind):
    theta = np.array([0.3, -2.0, 5.0])
    new, _ = apply_update(theta, np.zeros(3), OptimizerState.create(kind, 0.5, 3))
    np.testing.assert_array_equal(new, theta)


def test_adam_first_step():
    new, state = apply_update(np.zeros(4), np.ones(4), OptimizerState.create("adam", 1e-4, 4))
    # bias correction gives m_hat = g, v_hat = g^2
    np.testing.assert_allclose(new, -1e-4 / (1 + 1e-8) * np.ones(4), rtol=1e-12)
    assert state.step == 1
    np.testing.assert_allclose(state.m, 0.1)
    np.testing.assert_allclose(state.v, 0.001)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(5)
    grads = rng.standard_normal((4, 5))
    state = OptimizerState.create("adam", 0.01, 5)
    p = theta.copy()
    for g in grads:
        p, state = apply_update(p, g, state)
    m = v = np.zeros(5)
    q = theta.copy()
    for k, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        q = q - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-13)


def test_errors():
    with pytest.raises(ValueError):
        apply_update(np.zeros(2), np.zeros(3), OptimizerState.create("sgd", 0.1, 2))
    with pytest.raises(ConfigurationError):
        OptimizerState.create("rmsprop", 0.1, 2)
