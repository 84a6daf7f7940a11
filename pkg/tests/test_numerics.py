import math

import numpy as np
import pytest

from idcf.errors import ConfigError, DimensionError, TrainingError
from idcf.numerics import (
    AdamConfig, ParamTensor, activation, activation_backward, adam_step, grad_check,
    least_squares_solve, matmul,
)


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)


def test_matmul_identity_and_shape_error():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(a, np.eye(3)), a)
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(a, a)


def test_matmul_hand_example():
    assert matmul([[1, 2], [3, 4]], [[5], [6]]).tolist() == [[17.0], [39.0]]


@pytest.mark.parametrize("kind", ["tanh", "relu", "sigmoid"])
def test_activation_backward_matches_finite_difference(kind):
    x = np.array([-2.0, -0.3, 0.4, 1.7])
    h = 1e-6
    fd = (activation(kind, x + h) - activation(kind, x - h)) / (2 * h)
    np.testing.assert_allclose(activation_backward(kind, x, np.ones(4)), fd, rtol=1e-6)


def test_relu_derivative_at_zero_is_zero():
    assert activation_backward("relu", np.zeros(1), np.ones(1))[0] == 0.0


def test_sigmoid_is_stable_for_large_inputs():
    out = activation("sigmoid", np.array([-800.0, 800.0]))
    assert out.tolist() == [0.0, 1.0]


def test_unknown_activation():
    with pytest.raises(ConfigError):
        activation("gelu", np.zeros(2))


def test_adam_first_step_moves_by_learning_rate():
    p = ParamTensor("w", np.array([1.0, -1.0]))
    p.grad[:] = [0.5, -2.0]
    adam_step(p, AdamConfig(learning_rate=0.1))
    # after one bias-corrected step each coordinate moves by ~lr * sign(grad)
    np.testing.assert_allclose(p.value, [0.9, -0.9], atol=1e-7)
    assert p.step_count == 1
    assert not p.grad.any()


def test_adam_rejects_nonfinite_gradient():
    p = ParamTensor("bad", np.zeros(3))
    p.grad[1] = math.nan
    with pytest.raises(TrainingError, match="bad"):
        adam_step(p, AdamConfig())


def test_weight_decay_only_on_marked_tensors():
    cfg = AdamConfig(learning_rate=0.1, weight_decay=1.0)
    emb = ParamTensor("emb", np.ones(2), decay=True)
    other = ParamTensor("w", np.ones(2))
    adam_step(emb, cfg)
    adam_step(other, cfg)
    assert np.all(emb.value < 1.0)
    assert np.array_equal(other.value, np.ones(2))


def test_adam_config_validation():
    with pytest.raises(ConfigError):
        AdamConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        AdamConfig(beta1=1.0)


def test_adam_minimizes_quadratic():
    p = ParamTensor("x", np.array([3.0, -2.0]))
    cfg = AdamConfig(learning_rate=0.05)
    for _ in range(2000):
        p.grad += 2 * (p.value - np.array([1.0, 0.5]))
        adam_step(p, cfg)
    np.testing.assert_allclose(p.value, [1.0, 0.5], atol=1e-3)


def test_grad_check_detects_wrong_gradient():
    p = ParamTensor("w", np.array([0.3, -0.7, 1.1]))

    def good():
        p.grad += 2 * p.value
        return float((p.value ** 2).sum())

    def bad():
        p.grad += 3 * p.value
        return float((p.value ** 2).sum())

    assert grad_check(good, [p], 32) < 1e-8
    assert grad_check(bad, [p], 32) > 0.1


def test_least_squares_exact_recovery():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20, 6))
    c_true = rng.normal(size=20)
    y = a.T @ c_true
    res = least_squares_solve(a, y)
    assert res.residual < 1e-10
    assert not res.degenerate


def test_least_squares_flags_rank_deficiency():
    a = np.ones((5, 3))
    res = least_squares_solve(a, np.array([1.0, 2.0, 3.0]))
    assert res.degenerate
    wide = np.random.default_rng(0).normal(size=(2, 4))
    assert least_squares_solve(wide, np.ones(4)).degenerate


def test_least_squares_shape_error():
    with pytest.raises(DimensionError):
        least_squares_solve(np.ones((4, 3)), np.ones(4))


def test_param_tensor_copy_is_deep():
    p = ParamTensor("w", np.zeros(2))
    q = p.copy()
    q.value[0] = 1.0
    assert p.value[0] == 0.0 and q.shape == p.shape
