"""Unit tests for the autodiff core, oracle implementations first."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airscene import numerics as nm


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def mse_oracle(pred, target, mask) -> float:
    total, count = 0.0, 0
    for p, t, m in zip(pred.ravel(), target.ravel(), mask.ravel()):
        if m:
            total += (p - t) ** 2
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nm.matmul(nm.const(np.eye(2)), nm.const(a))
    np.testing.assert_array_equal(out.value, a)


def test_matmul_projector():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = nm.matmul(nm.const(p), nm.const(b))
    np.testing.assert_array_equal(out.value, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = nm.matmul(nm.const(a), nm.const(b))
    np.testing.assert_allclose(out.value, matmul_oracle(a, b), atol=1e-12, rtol=0)


def test_matmul_oracle_on_many_small_shapes():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m, k, n = rng.integers(1, 17, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        out = nm.matmul(nm.const(a), nm.const(b))
        np.testing.assert_allclose(out.value, matmul_oracle(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nm.ShapeMismatchError, match=r"\(2, 3\).*\(2, 2\)"):
        nm.matmul(nm.const(np.zeros((2, 3))), nm.const(np.zeros((2, 2))))


def test_matmul_t_matches_transposed_oracle():
    rng = np.random.default_rng(19)
    for _ in range(10):
        m, k, n = rng.integers(1, 13, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(n, k))
        out = nm.matmul_t(nm.const(a), nm.const(b))
        np.testing.assert_allclose(out.value, matmul_oracle(a, b.T), atol=1e-12, rtol=0)
    with pytest.raises(nm.ShapeMismatchError, match="contraction"):
        nm.matmul_t(nm.const(np.zeros((2, 3))), nm.const(np.zeros((2, 4))))


def test_matmul_t_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    a = nm.param(rng.normal(size=(3, 4)))
    b = nm.param(rng.normal(size=(5, 4)))
    target = rng.normal(size=(3, 5))
    rel = nm.grad_check(
        lambda: nm.mse(nm.matmul_t(a, b), nm.const(target)), [a, b], step=1e-6
    )
    assert rel < 1e-7


# ---------------------------------------------------------------------------
# softmax_rows
# ---------------------------------------------------------------------------

def test_softmax_uniform_logits():
    out = nm.softmax_rows(nm.const([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_softmax_dominant_logit():
    out = nm.softmax_rows(nm.const([[1000.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.value, [[1.0, 0.0, 0.0]], rtol=0, atol=1e-12)


def test_softmax_masked_closed_form():
    # softmax over the two allowed logits {1, 3}: [1/(1+e^2), e^2/(1+e^2)]
    out = nm.softmax_rows(
        nm.const([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])
    )
    e2 = math.exp(2.0)
    np.testing.assert_allclose(
        out.value, [[1 / (1 + e2), 0.0, e2 / (1 + e2)]], rtol=1e-14, atol=0
    )
    assert out.value[0, 1] == 0.0


def test_softmax_fully_masked_row_raises():
    with pytest.raises(nm.MaskError, match="rows \\[1\\]"):
        nm.softmax_rows(
            nm.const(np.zeros((2, 3))),
            mask=np.array([[True, True, True], [False, False, False]]),
        )


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_softmax_rows_are_probabilities(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(m, n))
    mask = rng.random((m, n)) < 0.6
    mask[np.arange(m), rng.integers(0, n, size=m)] = True  # every row allowed
    out = nm.softmax_rows(nm.const(x), mask=mask).value
    np.testing.assert_allclose(out.sum(axis=1), np.ones(m), rtol=0, atol=1e-9)
    assert np.all(out[~mask] == 0.0)
    assert np.all(out >= 0.0)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nm.layer_norm(
        nm.const([[3.0, 3.0, 3.0, 3.0]]), nm.const(np.ones(4)), nm.const(np.zeros(4))
    )
    np.testing.assert_array_equal(out.value, np.zeros((1, 4)))


def test_layer_norm_already_normalized():
    out = nm.layer_norm(
        nm.const([1.0, -1.0]), nm.const(np.ones(2)), nm.const(np.zeros(2)), eps=1e-300
    )
    np.testing.assert_allclose(out.value, [1.0, -1.0], rtol=1e-12, atol=0)


def test_layer_norm_mean_variance_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=5) * 4 + 2
    out = nm.layer_norm(
        nm.const(x), nm.const(np.ones(5)), nm.const(np.zeros(5)), eps=1e-12
    ).value
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-9


def test_layer_norm_rejects_width_one():
    with pytest.raises(nm.ShapeMismatchError):
        nm.layer_norm(nm.const([[1.0]]), nm.const([1.0]), nm.const([0.0]))


# ---------------------------------------------------------------------------
# mse
# ---------------------------------------------------------------------------

def test_mse_zero_when_equal():
    x = np.arange(6.0).reshape(2, 3)
    assert nm.mse(nm.const(x), nm.const(x)).item() == 0.0


def test_mse_unit_offset():
    x = np.arange(6.0).reshape(2, 3)
    assert nm.mse(nm.const(x + 1.0), nm.const(x)).item() == pytest.approx(1.0, abs=0)


def test_mse_half_masked_matches_loop_oracle():
    rng = np.random.default_rng(5)
    pred = rng.normal(size=(4, 4))
    target = rng.normal(size=(4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2] = True
    got = nm.mse(nm.const(pred), nm.const(target), mask).item()
    assert got == pytest.approx(mse_oracle(pred, target, mask), rel=1e-14)


def test_mse_empty_mask_raises():
    with pytest.raises(nm.MaskError):
        nm.mse(nm.const(np.zeros((2, 2))), nm.const(np.zeros((2, 2))), np.zeros((2, 2), bool))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_linear_map_gradient():
    # loss = sum(W @ x): dL/dW[i, :] = x^T for every row i.
    w = nm.param(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    x = np.array([[2.0], [7.0]])
    loss = nm.ssum(nm.matmul(w, nm.const(x)))
    loss.backward()
    np.testing.assert_array_equal(w.grad, np.tile(x.T, (3, 1)))


def test_backward_requires_scalar():
    w = nm.param(np.ones((2, 2)))
    with pytest.raises(nm.ShapeMismatchError):
        nm.matmul(w, w).backward()


def test_backward_visits_shared_subexpression_once():
    # y = x * x reuses x; d/dx (x*x + x*x) = 4x only if grads accumulate once per path.
    x = nm.param(np.array([3.0]))
    y = nm.mul(x, x)
    loss = nm.ssum(nm.add(y, y))
    loss.backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_softmax_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = nm.param(rng.normal(size=(3, 4)))
    t = rng.random((3, 4))

    def f():
        return nm.mse(nm.softmax_rows(x), nm.const(t))

    err = nm.grad_check(f, [x], step=1e-5)
    assert err < 1e-5


def test_row_shuffle_ops_gradients():
    rng = np.random.default_rng(13)
    a = nm.param(rng.normal(size=(6, 4)))
    b = nm.param(rng.normal(size=(2, 4)))
    t = rng.normal(size=(2, 6))

    def f():
        left = nm.cols(a, 0, 2)
        right = nm.cols(a, 2, 4)
        merged = nm.concat_cols([left, right])          # == a
        inter = nm.interleave_rows([merged, merged, merged])
        pooled = nm.group_mean_rows(inter, 9)           # (2, 4)
        z = nm.matmul(pooled, nm.transpose(b))          # (2, 2)
        g = nm.gelu(z)
        pred = nm.concat_cols([g, g, g])                # (2, 6)
        return nm.mse(pred, nm.const(t))

    err = nm.grad_check(f, [a, b], step=1e-6)
    assert err < 1e-6


def test_grad_check_quadratic():
    x = nm.param(np.array([1.0, -2.0, 3.0]))

    def f():
        return nm.ssum(nm.mul(x, x))

    assert nm.grad_check(f, [x], step=1e-6) < 1e-8


def test_grad_check_layer_norm_mse():
    rng = np.random.default_rng(21)
    x = nm.param(rng.normal(size=(4, 6)))
    g = nm.param(rng.normal(size=6))
    b = nm.param(rng.normal(size=6))
    t = rng.normal(size=(4, 6))

    def f():
        return nm.mse(nm.layer_norm(x, g, b, eps=1e-8), nm.const(t))

    assert nm.grad_check(f, [x, g, b], step=1e-5) < 1e-5


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def test_operations_are_deterministic():
    rng = np.random.default_rng(17)
    a = rng.normal(size=(8, 8))
    b = rng.normal(size=(8, 8))
    mask = rng.random((8, 8)) < 0.5
    mask[:, 0] = True

    def run():
        x = nm.matmul(nm.const(a), nm.const(b))
        w = nm.softmax_rows(x, mask=mask)
        return nm.matmul(w, nm.const(b)).value

    first, second = run(), run()
    assert np.array_equal(first, second)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_result_raises():
    big = nm.const(np.full((2, 2), 1e308))
    with pytest.raises(nm.NonFiniteError):
        nm.add(big, big)


def test_results_are_immutable():
    out = nm.add(nm.const(np.ones(3)), nm.const(np.ones(3)))
    with pytest.raises(ValueError):
        out.value[0] = 5.0


def test_gradient_shape_matches_value_shape():
    x = nm.param(np.ones((2, 3)))
    loss = nm.ssum(nm.mul(x, x))
    loss.backward()
    assert x.grad.shape == x.value.shape
