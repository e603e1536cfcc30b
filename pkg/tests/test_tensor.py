import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from muir.tensor import (
    Adam,
    ContractError,
    ShapeError,
    Tape,
    einsum,
    exp,
    forward_backward,
    mean,
    mode1_product,
    mse,
    relu,
    softmax,
    softmax_array,
    sqrt,
    square,
    sum_,
    take,
    tanh,
)

from _helpers import numeric_grad, rel_err

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def check_grad(build, *inputs, tol=1e-4):
    """Compare tape gradients of ``build(tape, vars)`` with finite differences."""
    _, grads = forward_backward(build, inputs)
    for k, x in enumerate(inputs):

        def f(xk, k=k):
            args = list(inputs)
            args[k] = xk
            tape = Tape()
            return float(build(tape, [tape.var(a) for a in args]).value)

        assert rel_err(grads[k], numeric_grad(f, x)) <= tol


# ---------------------------------------------------------------- softmax


def test_softmax_known_values():
    np.testing.assert_allclose(softmax_array([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(softmax_array(np.zeros(9)), np.full(9, 1 / 9))


def test_softmax_large_logits_stay_finite():
    p = softmax_array([1000.0, 1000.0, -1000.0])
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(s, shift):
    p = softmax_array(s)
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p >= 0).all()
    np.testing.assert_allclose(softmax_array(s + shift), p, atol=1e-12)


# ---------------------------------------------------------------- gradients


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradient(a, b):
    check_grad(lambda t, v: sum_(square(v[0] @ v[1])), a, b)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), arrays(np.float64, (2,), elements=finite))
def test_mode1_product_gradient(H, z):
    check_grad(lambda t, v: sum_(square(mode1_product(v[0], v[1]))), H, z)


def test_mode1_product_values_and_shape_check():
    H = np.arange(24.0).reshape(2, 3, 4)
    tape = Tape()
    out = mode1_product(tape.var(H), tape.var(np.array([1.0, -2.0])))
    np.testing.assert_array_equal(out.value, H[0] - 2 * H[1])
    with pytest.raises(ShapeError):
        mode1_product(tape.var(H), tape.var(np.ones(3)))


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_einsum_gradient(a, b):
    check_grad(lambda t, v: sum_(square(einsum("kij,jk->ki", v[0], v[1]))), a, b)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_gradient(s):
    w = np.linspace(-1, 1, 10).reshape(2, 5)
    check_grad(lambda t, v: sum_(softmax(v[0], axis=1) * t.const(w)), s)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
def test_pointwise_gradients(x):
    check_grad(lambda t, v: sum_(tanh(v[0]) * exp(v[0] * 0.5)), x)
    check_grad(lambda t, v: mean(sqrt(square(v[0]), eps=1.0)), x)


def test_relu_gradient_away_from_kink():
    x = np.array([[-1.5, 0.3], [2.0, -0.2]])
    check_grad(lambda t, v: sum_(relu(v[0]) * v[0]), x)


def test_take_accumulates_repeated_rows():
    tape = Tape()
    a = tape.var(np.arange(6.0).reshape(3, 2))
    out = sum_(take(a, [0, 2, 0]))
    (g,) = tape.gradient(out, [a])
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_broadcast_add_unbroadcasts():
    x = np.ones((4, 3))
    b = np.array([0.5, -1.0, 2.0])
    check_grad(lambda t, v: sum_(square(v[0] + v[1])), x, b)


def test_mse_gradient_and_shape_check():
    pred, target = np.array([1.0, 2.0, 3.0]), np.array([0.0, 2.0, 5.0])
    loss, (g,) = forward_backward(lambda t, v: mse(v[0], target), [pred])
    assert loss == pytest.approx(5.0 / 3.0)
    np.testing.assert_allclose(g, 2 * (pred - target) / 3)
    tape = Tape()
    with pytest.raises(ShapeError):
        mse(tape.var(pred), np.zeros(4))


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        forward_backward(lambda t, v: v[0] * 2.0, [np.ones(3)])


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    a, b = tape.var(np.ones(2)), tape.var(np.ones(3))
    ga, gb = tape.gradient(sum_(a), [a, b])
    np.testing.assert_array_equal(ga, 1.0)
    np.testing.assert_array_equal(gb, 0.0)


# ---------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(lr=0.1)
    opt.step(p, {"w": np.array([4.0, -0.001, 0.0])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_lr_override_and_reset():
    p = {"a": np.zeros(2), "s": np.zeros((2, 3))}
    opt = Adam(lr=1e-3, lr_overrides={"s": 0.5})
    opt.step(p, {"a": np.ones(2), "s": np.ones((2, 3))})
    np.testing.assert_allclose(p["s"], -0.5, atol=1e-6)
    opt.reset("s")
    assert opt.state["s"].step == 0 and not opt.state["s"].m.any()
    assert opt.state["a"].step == 1
    opt.reset("a", 0)
    assert opt.state["a"].m[0] == 0 and opt.state["a"].m[1] != 0


def test_adam_snapshot_restore_is_exact():
    p = {"w": np.ones(3)}
    opt = Adam(lr=0.01)
    opt.step(p, {"w": np.array([1.0, 2.0, 3.0])})
    snap = opt.snapshot()
    w_saved = p["w"].copy()
    opt.step(p, {"w": np.array([3.0, 2.0, 1.0])})
    after = p["w"].copy()
    opt.restore(snap)
    p["w"][...] = w_saved
    opt.step(p, {"w": np.array([3.0, 2.0, 1.0])})
    np.testing.assert_array_equal(p["w"], after)
