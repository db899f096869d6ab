import math

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from fxnet.layers import sigmoid
from fxnet.optim import (
    Adam,
    LossSpec,
    binary_cross_entropy,
    cross_entropy,
    head_loss,
    mse,
    softmax_cross_entropy,
    sparse_au_loss,
)
from fxnet.tensor import DimensionError


def test_adam_first_step_hand_computed():
    # m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    theta = {"w": np.zeros(5)}
    Adam(lr=1e-3, decay=0.0).step(theta, {"w": np.ones(5)})
    np.testing.assert_allclose(theta["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_is_noop():
    theta = {"w": np.arange(4.0)}
    Adam().step(theta, {"w": np.zeros(4)})
    np.testing.assert_array_equal(theta["w"], np.arange(4.0))


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(0)
        theta = {"w": rng.normal(size=10)}
        opt = Adam()
        for _ in range(50):
            opt.step(theta, {"w": 2 * theta["w"] + rng.normal(size=10)})
        return theta["w"]

    assert run().tobytes() == run().tobytes()


def test_adam_lr_decay_schedule():
    opt = Adam(lr=1e-3, decay=1e-5)
    for _ in range(1000):
        opt.step({"w": np.zeros(1)}, {"w": np.zeros(1)})
    assert math.isclose(opt.current_lr(), 1e-3 / (1 + 1e-5 * 1000))


def test_adam_step_bounded_on_constant_gradient():
    theta = {"w": np.zeros(3)}
    opt = Adam(decay=1e-5)
    for _ in range(200):
        before = theta["w"].copy()
        opt.step(theta, {"w": np.array([0.3, -5.0, 1e-3])})
        assert np.all(np.abs(theta["w"] - before) <= 2 * opt.current_lr())


def test_adam_weight_decay_mode_adds_l2_term():
    theta = {"w": np.ones(2)}
    opt = Adam(lr=1e-3, decay=0.5, decay_mode="weight")
    opt.step(theta, {"w": np.zeros(2)})
    # gradient becomes 0.5 * theta, a positive constant: first step is -lr
    np.testing.assert_allclose(theta["w"], 1 - 1e-3 / (1 + 1e-8 / 0.5), rtol=1e-9)
    assert opt.current_lr() == 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        Adam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})


def test_cross_entropy_values():
    loss, _ = cross_entropy(np.eye(8)[[2]], np.array([2]))
    assert loss == 0.0
    loss, _ = cross_entropy(np.full((1, 8), 0.125), np.array([5]))
    assert math.isclose(loss, math.log(8), rel_tol=1e-12)
    assert math.isclose(math.log(8), 2.0794, abs_tol=1e-4)


def test_cross_entropy_one_hot_target_and_floor():
    loss, grad = cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert math.isclose(loss, -math.log(1e-12))
    np.testing.assert_array_equal(grad, [[1.0, -1.0]])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 8))
    y = np.array([0, 3, 7, 3])
    _, grad = softmax_cross_entropy(z, y)
    num = numeric_grad(lambda: softmax_cross_entropy(z, y)[0], z)
    assert rel_error(grad, num) <= 1e-6


def test_sparse_loss_reduces_to_base():
    rng = np.random.default_rng(1)
    out = rng.uniform(0.05, 0.95, size=(3, 6))
    tgt = rng.integers(0, 2, size=(3, 6))
    assert sparse_au_loss(out, tgt, 0.0, 0.0)[0] == binary_cross_entropy(out, tgt)[0]
    out = rng.normal(size=(3, 6))
    tgt = rng.integers(0, 6, size=(3, 6))
    assert sparse_au_loss(out, tgt, 0.0, 0.0, base="mse")[0] == mse(out, tgt)[0]


def test_sparse_loss_zero_output_has_no_penalty():
    tgt = np.ones((2, 4))
    out = np.zeros((2, 4))
    assert sparse_au_loss(out, tgt, 0.3, 0.7, base="mse")[0] == mse(out, tgt)[0]


@pytest.mark.parametrize("base", ["bce", "mse"])
def test_sparse_loss_gradient(base):
    rng = np.random.default_rng(2)
    out = rng.uniform(0.1, 0.9, size=(3, 5))
    tgt = rng.integers(0, 2 if base == "bce" else 6, size=(3, 5))
    _, grad = sparse_au_loss(out, tgt, 0.01, 0.02, base=base)
    num = numeric_grad(lambda: sparse_au_loss(out, tgt, 0.01, 0.02, base=base)[0], out)
    assert rel_error(grad, num) <= 1e-6


def test_sparse_loss_rejects_negative_lambda():
    with pytest.raises(ValueError):
        sparse_au_loss(np.zeros((1, 2)), np.zeros((1, 2)), -1.0, 0.0)
    with pytest.raises(ValueError):
        LossSpec("sparse_au", 0.0, -0.1)


def test_increasing_l1_never_decreases_loss():
    rng = np.random.default_rng(3)
    out = rng.normal(size=(4, 7))
    tgt = rng.integers(0, 6, size=(4, 7))
    losses = [sparse_au_loss(out, tgt, lam, 0.01, base="mse")[0] for lam in (0.0, 0.01, 0.1, 1.0)]
    assert losses == sorted(losses)
    assert all(l >= 0 for l in losses)


@pytest.mark.parametrize("activation,kind", [("sigmoid", "sparse_au"), ("sigmoid", "cross_entropy"),
                                             ("linear", "sparse_au"), ("linear", "mse"),
                                             ("softmax", "cross_entropy")])
def test_head_loss_gradient_wrt_logits(activation, kind):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 6))
    if activation == "softmax":
        tgt = np.array([1, 5, 0])
    elif activation == "sigmoid":
        tgt = rng.integers(0, 2, size=(3, 6))
    else:
        tgt = rng.integers(0, 6, size=(3, 6))
    spec = LossSpec(kind, 0.05, 0.03)
    _, grad = head_loss(z, tgt, activation, spec)
    num = numeric_grad(lambda: head_loss(z, tgt, activation, spec)[0], z)
    assert rel_error(grad, num) <= 1e-6


def test_sigmoid_head_loss_matches_composed_definition():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 4))
    tgt = rng.integers(0, 2, size=(2, 4))
    composed = sparse_au_loss(sigmoid(z), tgt, 0.1, 0.2)[0]
    assert math.isclose(head_loss(z, tgt, "sigmoid", LossSpec("sparse_au", 0.1, 0.2))[0], composed, rel_tol=1e-12)
