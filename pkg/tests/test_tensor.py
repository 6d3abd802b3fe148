import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reusekd.rng import Rng
from reusekd import tensor as T
from reusekd.tensor import (
    GradCheckError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward_fault,
    concat_cols,
    gather_rows,
    gelu,
    grad_check,
    l2_rows,
    layernorm,
    mask_rows,
    matmul,
    softmax_rows,
)


def randt(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(shape), requires_grad=requires_grad)


# -- forward values -----------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.arange(9.0).reshape(3, 3))
    eye = Tensor(np.eye(3))
    out = matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_reports_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(a, b)


def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[2.0, 2.0, 2.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)


def test_softmax_large_values_stay_finite():
    out = softmax_rows(Tensor([[1000.0, 1000.0, 999.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == out.data[0, 1] > out.data[0, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=4, max_size=4),
                min_size=1, max_size=6))
def test_softmax_rows_are_distributions(rows):
    out = softmax_rows(Tensor(rows))
    assert np.all(out.data >= 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_layernorm_constant_row_maps_to_beta():
    x = Tensor([[5.0, 5.0, 5.0]])
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.zeros(3))
    np.testing.assert_allclose(layernorm(x, gamma, beta).data, 0.0, atol=1e-12)


def test_layernorm_already_normalized_row():
    x = Tensor([[1.0, -1.0]])
    out = layernorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_mask_rows_replaces_only_selected_rows():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    emb = Tensor([9.0, 9.0, 9.0])
    out = mask_rows(x, [1, 3], emb)
    np.testing.assert_array_equal(out.data[[0, 2]], x.data[[0, 2]])
    np.testing.assert_array_equal(out.data[[1, 3]], 9.0)


def test_l2_rows_hand_case():
    out = l2_rows(Tensor([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [5.0, 0.0])


def test_nonfinite_is_an_error_not_silent():
    with pytest.raises(NonFiniteError):
        Tensor([np.inf, 1.0])
    big = Tensor([[1e200]])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        T.mul(big, big)  # overflows float64


# -- gradients vs finite differences ------------------------------------------


def fd_check(build, params, tol=1e-4, eps=1e-5):
    err = grad_check(build, params, epsilon=eps)
    assert err < tol, f"max relative gradient error {err}"


def test_matmul_gradient():
    rng = Rng(42)
    a, b = randt(rng, 4, 5), randt(rng, 5, 6)
    fd_check(lambda _: matmul(a, b).sum(), [a, b])


def test_softmax_gradient():
    rng = Rng(1)
    x = randt(rng, 3, 3)
    w = Tensor(rng.normal((3, 3)))  # fixed mixing so the scalar sees all entries
    fd_check(lambda _: T.mul(softmax_rows(x), w).sum(), [x])


def test_layernorm_gradient():
    rng = Rng(2)
    x, gamma, beta = randt(rng, 4, 6), randt(rng, 6), randt(rng, 6)
    w = Tensor(rng.normal((4, 6)))
    fd_check(lambda _: T.mul(layernorm(x, gamma, beta), w).sum(), [x, gamma, beta])


def test_gelu_gradient():
    rng = Rng(3)
    x = randt(rng, 5, 4)
    fd_check(lambda _: gelu(x).sum(), [x])


def test_gather_and_mask_rows_gradient():
    rng = Rng(4)
    x = randt(rng, 6, 3)
    emb = randt(rng, 3)
    idx = [1, 4]

    def build(_):
        masked = mask_rows(x, idx, emb)
        picked = gather_rows(masked, [0, 1, 4, 5])
        return l2_rows(picked).mean()

    fd_check(build, [x, emb])


def test_l2_rows_zero_row_has_zero_subgradient():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    out = l2_rows(x).sum()
    out.backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_concat_and_transpose_gradient():
    rng = Rng(5)
    a, b = randt(rng, 3, 2), randt(rng, 3, 4)
    w = Tensor(rng.normal((6, 3)))
    fd_check(lambda _: matmul(concat_cols([a, b]), w).sum(), [a, b])


def test_bias_broadcast_gradient():
    rng = Rng(6)
    x, bias = randt(rng, 4, 3), randt(rng, 3)
    fd_check(lambda _: l2_rows(T.add(x, bias)).sum(), [x, bias])


def test_fanout_accumulates():
    x = Tensor([[2.0]], requires_grad=True)
    out = T.mul(x, x).sum()  # x**2, d/dx = 2x
    out.backward()
    np.testing.assert_allclose(x.grad, [[4.0]])


# -- grad_check harness --------------------------------------------------------


def test_grad_check_polynomial_is_nearly_exact():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)

    def sum_of_squares(t):
        return T.mul(t, t).sum()

    err = grad_check(sum_of_squares, x, epsilon=1e-5)
    assert err < 1e-8


def test_grad_check_detects_corrupted_backward():
    rng = Rng(7)
    a, b = randt(rng, 3, 3), randt(rng, 3, 3)
    with backward_fault():
        err = grad_check(lambda _: matmul(a, b).sum(), [a, b])
    assert err > 1e-2


def test_grad_check_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GradCheckError):
        grad_check(lambda _: T.mul(x, x), x)


# -- determinism ---------------------------------------------------------------


def test_same_seed_same_stream():
    a = Rng(123).normal((4, 4))
    b = Rng(123).normal((4, 4))
    np.testing.assert_array_equal(a, b)
    child_a = Rng(123).derive("weights", 3).normal((2,))
    child_b = Rng(123).derive("weights", 3).normal((2,))
    np.testing.assert_array_equal(child_a, child_b)
    other = Rng(123).derive("weights", 4).normal((2,))
    assert not np.array_equal(child_a, other)


def test_graph_reuse_is_bit_deterministic():
    rng = Rng(8)
    x = randt(rng, 5, 5)
    w = Tensor(rng.normal((5, 5)))

    def run():
        x.grad = None
        out = l2_rows(matmul(softmax_rows(x), w)).mean()
        out.backward()
        return out.data.copy(), x.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(g1, g2)
