"""Tests for the Adam optimizer and the finite-difference gradient checker."""

import numpy as np
import pytest

import mriseq.autodiff as ad
from mriseq.autodiff import Tensor
from mriseq.optim import Adam, OptimizerState, adam_step, grad_check


def reference_adam(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent textbook Adam with bias correction, scalar history."""
    p = np.array(p0, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_two_steps_constant_gradient_hand_oracle():
    # with a constant gradient the bias-corrected step is lr * g / (|g| + eps)
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = OptimizerState.for_params([p], learning_rate=0.1)
    expected = 1.0
    for _ in range(2):
        p.grad = np.array([0.5])
        adam_step([p], state)
        expected -= 0.1 * 0.5 / (0.5 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], atol=1e-12)
    assert state.t == 2


def test_matches_reference_adam_on_random_gradients():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(9)]
    p = Tensor(p0.copy(), requires_grad=True)
    state = OptimizerState.for_params([p], learning_rate=3e-3)
    for g in grads:
        p.grad = g.copy()
        adam_step([p], state)
    np.testing.assert_allclose(p.data, reference_adam(p0, grads, 3e-3),
                               atol=1e-12)


def test_none_gradients_are_skipped():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    state = OptimizerState.for_params([a, b], learning_rate=0.1)
    a.grad = np.array([1.0])
    b.grad = None
    adam_step([a, b], state)
    assert a.data[0] != 1.0
    assert b.data[0] == 2.0


def test_state_length_mismatch_raises():
    a = Tensor(np.array([1.0]), requires_grad=True)
    state = OptimizerState.for_params([a])
    with pytest.raises(ValueError):
        adam_step([a, a], state)


def test_gradient_shape_mismatch_raises():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = OptimizerState.for_params([a])
    a.grad = np.array([1.0])
    with pytest.raises(ValueError):
        adam_step([a], state)


def test_adam_wrapper_zero_grad_and_step():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.5)
    loss = ad.sum_all(ad.mul(p, p))
    opt.zero_grad()
    assert p.grad is None
    loss.backward()
    p.grad = np.array([1.0, -1.0])
    opt.step()
    # sign-like first step of size lr (bias correction cancels at t=1)
    np.testing.assert_allclose(p.data, [-0.5, 0.5], atol=1e-7)


def test_adam_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        opt = Adam([p], learning_rate=1e-2)
        for _ in range(20):
            opt.zero_grad()
            ad.sum_all(ad.mul(p, p)).backward()
            opt.step()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.05)
    for _ in range(400):
        opt.zero_grad()
        ad.sum_all(ad.mul(p, p)).backward()
        opt.step()
    assert float(np.abs(p.data).max()) < 0.05


# ---------------------------------------------------------------------------
# grad_check self-tests

def test_grad_check_passes_on_correct_gradient():
    x = Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)

    def loss_fn():
        return ad.sum_all(ad.mul(x, x))

    report = grad_check(loss_fn, {"x": x})
    assert report["x"] < 1e-7


def test_grad_check_flags_wrong_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad_square(t):
        out = Tensor(t.data ** 2, requires_grad=True, parents=(t,), op="bad")

        def backward(g):
            t.grad = g * t.data if t.grad is None else t.grad + g * t.data

        out._backward = backward
        return out

    def loss_fn():
        return ad.sum_all(bad_square(x))

    report = grad_check(loss_fn, {"x": x})
    assert report["x"] > 0.1


def test_grad_check_requires_float64():
    x = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: ad.sum_all(x), {"x": x})


def test_grad_check_requires_gradient_flow():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)

    def loss_fn():
        return ad.sum_all(x)

    with pytest.raises(ValueError):
        grad_check(loss_fn, {"x": x, "y": y})


def test_grad_check_max_coords_subsamples():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=50), requires_grad=True)

    def loss_fn():
        return ad.sum_all(ad.mul(x, x))

    report = grad_check(loss_fn, {"x": x}, max_coords=5,
                        rng=np.random.default_rng(2))
    assert report["x"] < 1e-7
