import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fada import gradcheck
from fada import tensor as T

floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def arr(shape):
    return hnp.arrays(np.float64, shape, elements=floats)


@pytest.mark.parametrize("op", T.PRIMITIVES)
def test_primitive_matches_finite_differences(op):
    rep = gradcheck.check_op(op, instances=5, seed=11)
    assert rep.ok, f"{op}: {rep.worst}"


def test_matmul_grad_closed_form():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    with T.tape():
        ta, tb = T.Tensor(a, True), T.Tensor(b, True)
        T.backward(T.sum(T.matmul(ta, tb)))
        np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T)
        np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 2)))


def test_broadcast_add_reduces_gradient_to_input_shape():
    with T.tape():
        a = T.Tensor(np.ones((4, 3)), True)
        b = T.Tensor(np.ones(3), True)
        T.backward(T.sum(T.add(a, b)))
        assert b.grad.shape == (3,)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_gradients_accumulate_across_backward_calls():
    x = T.Tensor([2.0], True)
    with T.tape():
        T.backward(T.mul(x, x))
    with T.tape():
        T.backward(T.mul(x, 3.0))
    assert x.grad[0] == pytest.approx(7.0)


def test_reused_input_sums_both_paths():
    with T.tape():
        x = T.Tensor([1.5], True)
        y = T.add(T.mul(x, x), T.exp(x))
        T.backward(y)
        assert x.grad[0] == pytest.approx(3.0 + np.exp(1.5))


def test_backward_after_tape_exit_raises():
    with T.tape():
        x = T.Tensor([1.0], True)
        y = T.mul(x, 2.0)
    with pytest.raises(T.GraphError):
        T.backward(y)


def test_no_grad_records_nothing():
    with T.tape() as g:
        x = T.Tensor([1.0, 2.0], True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad
        assert g.nodes == []


def test_non_scalar_loss_rejected():
    with T.tape():
        x = T.Tensor(np.ones(3), True)
        with pytest.raises(T.ShapeError):
            T.backward(T.mul(x, 2.0))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_log_of_zero_without_floor_is_a_numeric_fault():
    with pytest.raises(T.NumericFault):
        T.log(np.array([0.0, 1.0]))
    assert np.isfinite(T.log(np.array([0.0]), 1e-12).data).all()


def test_batchnorm_train_updates_running_stats_eval_uses_them():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(256, 2))
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, train=True)
    np.testing.assert_allclose(out.data.mean(0), 0.0, atol=1e-10)
    m = T.BN_MOMENTUM
    np.testing.assert_allclose(rm, (1 - m) * x.mean(0))
    ev = T.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, train=False)
    np.testing.assert_allclose(ev.data, (x - rm) / np.sqrt(rv + T.BN_EPS))


def test_dropout_eval_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.dropout(x, 0.5, None, train=False).data, x)


def test_sgd_momentum_matches_heavy_ball_recursion():
    p = T.Tensor(np.zeros(2))
    opt = T.SGD(0.1, momentum=0.5)
    g = np.array([1.0, -2.0])
    opt.step({"p": p}, {"p": g})
    opt.step({"p": p}, {"p": g})
    # buffers: g, then 0.5 g + g
    np.testing.assert_allclose(p.data, -0.1 * (g + 1.5 * g))


@settings(max_examples=40, deadline=None)
@given(arr((3, 4)))
def test_softmax_rows_are_distributions(x):
    s = T.softmax(x, axis=1).data
    np.testing.assert_allclose(s.sum(1), 1.0)
    assert (s >= 0).all()


@settings(max_examples=40, deadline=None)
@given(arr((4, 3)), arr((4, 3)))
def test_sum_is_linear_in_gradient(a, b):
    # d/dx sum(a*x + b*x) = a + b, independent of x
    with T.tape():
        x = T.Tensor(np.ones((4, 3)), True)
        T.backward(T.sum(T.add(T.mul(x, a), T.mul(x, b))))
        np.testing.assert_allclose(x.grad, a + b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1))
def test_concat_then_split_gradient_round_trip(n, m, axis):
    rng = np.random.default_rng(n * 10 + m)
    a, b = rng.normal(size=(n, m)), rng.normal(size=(n, m))
    w = rng.normal(size=(2 * n, m) if axis == 0 else (n, 2 * m))
    with T.tape():
        ta, tb = T.Tensor(a, True), T.Tensor(b, True)
        T.backward(T.sum(T.mul(T.concat([ta, tb], axis=axis), w)))
        wa, wb = np.split(w, 2, axis=axis)
        np.testing.assert_allclose(ta.grad, wa)
        np.testing.assert_allclose(tb.grad, wb)


def test_fault_injected_relu_rule_is_caught(monkeypatch):
    monkeypatch.setattr(T, "_relu_grad", lambda x, g: (-(g * (x > 0)),))
    rep = gradcheck.check_op("relu", instances=3)
    assert not rep.ok
