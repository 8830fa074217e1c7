import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alice3d import tensor as T
from alice3d.gradcheck import grad_check
from alice3d.tensor import Tensor, parameter

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# -- softmax ------------------------------------------------------------------
def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_matches_high_precision_formula():
    mpmath.mp.dps = 50
    x = [1.0, 2.0, 3.0]
    denom = sum(mpmath.e ** mpmath.mpf(v) for v in x)
    expected = [float(mpmath.e ** mpmath.mpf(v) / denom) for v in x]
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, expected, rtol=0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(T.NonFiniteError):
        T.softmax(Tensor([0.0, np.inf]))


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, rtol=0, atol=1e-12)
    shifted = T.softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(shifted, out, rtol=0, atol=1e-12)


# -- layer norm ---------------------------------------------------------------
def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_hand_value():
    # mean 2, population variance 2/3
    expected = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5)
    out = T.layer_norm(Tensor([[1.0, 2.0, 3.0]]), np.ones(3), np.zeros(3)).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_layer_norm_zero_gain_gives_bias():
    b = np.array([0.5, -1.0, 2.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), np.zeros(3), b)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (4, 3)))


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 3))), np.ones(4), np.zeros(4))


@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    spread = x.max(-1) - x.min(-1)
    out = T.layer_norm(Tensor(x), np.ones(6), np.zeros(6), eps=1e-5).data
    assert np.all(np.abs(out.mean(-1)) <= 1e-10)
    for row, s, src in zip(out, spread, x):
        if s > 1.0:  # eps is negligible against the row variance
            assert abs(row.var() - 1.0) <= 1e-5 / src.var() + 1e-8


# -- l2 normalize -------------------------------------------------------------
def test_l2_normalize_345():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_zero_row_errors():
    with pytest.raises(ZeroDivisionError):
        T.l2_normalize(Tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(T.l2_normalize(Tensor([[0.0, 0.0]]), eps=1e-12).data, [[0.0, 0.0]])


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)).filter(lambda a: np.all(np.linalg.norm(a, axis=-1) > 1e-3)), st.floats(1e-3, 1e3))
def test_l2_normalize_properties(x, c):
    out = T.l2_normalize(Tensor(x), axis=-1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-10)
    np.testing.assert_allclose(T.l2_normalize(Tensor(c * x)).data, out, atol=1e-12)
    np.testing.assert_allclose(T.l2_normalize(Tensor(out)).data, out, atol=1e-15)


# -- cosine loss --------------------------------------------------------------
@pytest.mark.parametrize(
    "a, b, expected",
    [([1.0, 2.0], [1.0, 2.0], -1.0), ([1.0, 0.0], [0.0, 3.0], 0.0), ([1.0, 0.0], [-1.0, 0.0], 1.0)],
)
def test_cosine_loss_examples(a, b, expected):
    assert T.cosine_loss(Tensor(a), Tensor(b)).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_loss_zero_row_errors():
    with pytest.raises(ZeroDivisionError):
        T.cosine_loss(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_loss_teacher_gets_no_gradient():
    s, t = parameter([1.0, 2.0, 0.5]), parameter([0.3, -1.0, 2.0])
    T.cosine_loss(s, t).backward()
    assert s.grad is not None and t.grad is None


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_cosine_loss_bounds_and_scale(a, b, c):
    if np.any(np.linalg.norm(a, axis=-1) < 1e-3) or np.any(np.linalg.norm(b, axis=-1) < 1e-3):
        return
    v = T.cosine_loss(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= v <= 1 + 1e-12
    assert T.cosine_loss(Tensor(c * a), Tensor(b)).item() == pytest.approx(v, abs=1e-12)
    assert T.cosine_loss(Tensor(a), Tensor(c * a)).item() == pytest.approx(-1.0, abs=1e-12)


# -- autodiff plumbing ----------------------------------------------------------
def test_backward_accumulates_shared_subexpressions():
    x = parameter(3.0)
    y = x * x
    z = y * y
    (z * z).backward()
    assert x.grad == pytest.approx(8 * 3.0**7)


def test_no_grad_builds_no_graph():
    x = parameter([1.0, 2.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_is_an_error_state():
    with pytest.raises(T.NonFiniteError):
        T.log(Tensor([0.0]))


# -- gradient checks ------------------------------------------------------------
def test_grad_check_square_sum():
    x = parameter([1.0, 2.0])
    x_sq = lambda: T.tsum(x * x)
    out = x_sq()
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert grad_check(x_sq, [x]).passed


def test_grad_check_flags_a_wrong_gradient():
    x = parameter([1.0, 2.0])

    def broken():
        # forward is x^3 but the backward claims 3x^2 + 1
        out = T._make(x.data**3, (x,), lambda g: (g * (3 * x.data**2 + 1),), "broken")
        return T.tsum(out)

    report = grad_check(broken, [x])
    assert not report.passed and len(report.flagged) == 2


def test_grad_check_cosine_loss_of_learnable_vectors():
    rng = np.random.default_rng(3)
    a, b = parameter(rng.normal(size=(2, 5))), parameter(rng.normal(size=(2, 5)))
    # both learnable: the loss is symmetric in form, so differentiate through both sides
    f = lambda: T.mul(T.mean(T.tsum(T.l2_normalize(a) * T.l2_normalize(b), axis=-1)), -1.0)
    assert grad_check(f, [a, b], tol=1e-4).passed
    g = lambda: T.cosine_loss(a, b.data)
    assert grad_check(g, [a], tol=1e-4).passed


def _primitive_cases(rng):
    A = parameter(rng.normal(size=(3, 4)))
    B = parameter(rng.normal(size=(4, 2)))
    C = parameter(rng.normal(size=(3, 4)))
    v = parameter(rng.normal(size=(4,)))
    W = parameter(rng.normal(size=(2, 3, 4)))
    g, b = parameter(rng.normal(size=4)), parameter(rng.normal(size=4))
    idx = rng.integers(0, 3, size=(5, 4))
    w = rng.normal(size=(3, 4))
    return {
        "add": (lambda: T.tsum((A + C + v) * w), [A, C, v]),
        "sub": (lambda: T.tsum((A - v) * w), [A, v]),
        "mul": (lambda: T.tsum(A * C * v), [A, C, v]),
        "div": (lambda: T.tsum(A / (C * C + 1.0)), [A, C]),
        "matmul": (lambda: T.tsum((A @ B) * (A @ B)), [A, B]),
        "batched_matmul": (lambda: T.tsum((W @ T.transpose(W)) * 0.5), [W]),
        "transpose": (lambda: T.tsum(T.transpose(A) @ C), [A, C]),
        "reshape": (lambda: T.tsum(A.reshape(2, 6) * w.reshape(2, 6) * A.reshape(2, 6)), [A]),
        "concat": (lambda: T.tsum(T.concat([A, C * 2.0], axis=0) * T.concat([C, A], axis=0)), [A, C]),
        "gather": (lambda: T.tsum(T.gather(A, idx, axis=0) * T.gather(C, idx, axis=0)), [A, C]),
        "index": (lambda: T.tsum(A[np.array([0, 2, 2])] * C[np.array([1, 1, 0])]), [A, C]),
        "gelu": (lambda: T.tsum(T.gelu(A) * w), [A]),
        "mean": (lambda: T.tsum(T.mean(A * C, axis=0) * v), [A, C, v]),
        "sum": (lambda: T.tsum(T.tsum(A * A, axis=1, keepdims=True) * C), [A, C]),
        "scalar": (lambda: T.tsum(A * 3.5 * C), [A, C]),
        "softmax": (lambda: T.tsum(T.softmax(A, axis=-1) * w), [A]),
        "log_softmax": (lambda: T.tsum(T.log_softmax(A, axis=0) * w), [A]),
        "layer_norm": (lambda: T.tsum(T.layer_norm(A, g, b) * w), [A, g, b]),
        "l2_normalize": (lambda: T.tsum(T.l2_normalize(A, axis=-1) * w), [A]),
        "exp_log_sqrt": (lambda: T.tsum(T.log(T.exp(A) + 1.0) + T.sqrt(C * C + 1.0)), [A, C]),
        "cross_entropy": (lambda: T.cross_entropy(A, np.array([0, 3, 1])), [A]),
    }


# the primitive inventory is plain plumbing; every entry must pass on every seed
def _primitive_ids():
    return list(_primitive_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", _primitive_ids())
def test_primitive_gradients_over_seeds(name):
    for seed in range(10):
        f, params = _primitive_cases(np.random.default_rng(seed))[name]
        report = grad_check(f, params, eps=1e-5, tol=1e-4)
        assert report.passed, (name, seed, report.flagged[:3])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_attention_gradient_property(seed):
    rng = np.random.default_rng(seed)
    q, k = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(5, 4)))
    v = rng.normal(size=(5, 2))
    f = lambda: T.tsum(T.softmax(q @ T.transpose(k) * 0.5, axis=-1) @ v)
    assert grad_check(f, [q, k]).passed
