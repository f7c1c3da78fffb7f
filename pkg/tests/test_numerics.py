import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmodes import _kernels_py, kernels
from latentmodes.numerics import (
    NumericsError,
    RngStream,
    finite_diff_grad,
    gaussian_draw,
    logsumexp,
    softmax,
    sym_eig,
)


def test_logsumexp_examples():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert logsumexp([3.25]) == 3.25
    mpmath.mp.dps = 50
    expected = float(mpmath.log(mpmath.exp(1000) + mpmath.exp(mpmath.mpf("1000.5"))))
    assert logsumexp([1000.0, 1000.5]) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(1000.9741, abs=1e-4)


def test_logsumexp_huge_and_empty():
    assert logsumexp([1e300, 1e300]) == pytest.approx(1e300)
    assert np.isfinite(logsumexp([-1e300, 1e300]))
    with pytest.raises(NumericsError, match="empty vector"):
        logsumexp([])


def test_softmax_examples():
    np.testing.assert_allclose(softmax([2.0, 2.0, 2.0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-15)
    p = softmax([50.0, 0.0, 0.0])
    mpmath.mp.dps = 50
    tail = float(1 / (mpmath.exp(50) + 2))
    np.testing.assert_allclose(p, [1 - 2 * tail, tail, tail], rtol=1e-12)
    assert abs(p.sum() - 1.0) <= 1e-15
    with pytest.raises(NumericsError):
        softmax([])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_properties(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    np.testing.assert_allclose(softmax(np.array(v) + c), p, atol=1e-12)


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=10))
def test_softmax_of_log_normalizes(p):
    p = np.array(p)
    np.testing.assert_allclose(softmax(np.log(p)), p / p.sum(), rtol=1e-12)


def test_sym_eig_examples():
    w, V = sym_eig(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    w, V = sym_eig(np.diag([1.0, 4.0]))
    np.testing.assert_allclose(w, [4, 1])
    np.testing.assert_allclose(np.abs(V), [[0, 1], [1, 0]], atol=1e-15)


@pytest.mark.parametrize("impl", [_kernels_py, kernels], ids=["python", "selected"])
@pytest.mark.parametrize("n", [1, 2, 5, 8, 33])
def test_jacobi_reconstruction(impl, n):
    rng = np.random.default_rng(n)
    X = rng.normal(size=(n, n))
    A = X + X.T
    w, V, _ = impl.jacobi_eigh(np.ascontiguousarray(A))
    assert np.linalg.norm(V @ np.diag(w) @ V.T - A) <= 1e-8 * np.linalg.norm(A)
    assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-10
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(A), atol=1e-10)


def test_sym_eig_errors():
    with pytest.raises(NumericsError):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(NumericsError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eig_random_5x5_residual():
    X = np.random.default_rng(5).normal(size=(5, 5))
    A = X @ X.T
    w, V = sym_eig(A)
    assert np.all(np.diff(w) <= 0)
    np.testing.assert_allclose(A @ V, V * w, atol=1e-10)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - A) < 1e-8 * np.linalg.norm(A)


def test_rng_determinism_and_independence():
    a = gaussian_draw(RngStream(7, 3), 4, 5)
    b = gaussian_draw(RngStream(7, 3), 4, 5)
    assert a.tobytes() == b.tobytes()
    big = gaussian_draw(RngStream(11), 100000, 1)
    assert abs(big.mean()) < 0.02
    assert abs(big.var() - 1.0) < 0.03
    x = gaussian_draw(RngStream(11, 1), 10000, 1)[:, 0]
    y = gaussian_draw(RngStream(11, 2), 10000, 1)[:, 0]
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.05


def test_rng_split_does_not_consume_parent():
    parent = RngStream(5)
    child = parent.split(3)
    first = parent.normal(3)
    assert np.array_equal(first, RngStream(5).normal(3))
    assert np.array_equal(child.normal(3), RngStream(5).split(3).normal(3))
    assert not np.array_equal(RngStream(5).split(3).normal(3), RngStream(5).split(4).normal(3))


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda x: 0.5 * x @ x, [1.0, 2.0]), [1, 2], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, [1.0, 2.0, 3.0]), 0.0)
    np.testing.assert_allclose(finite_diff_grad(logsumexp, [0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-6)


def test_finite_diff_reports_index():
    def f(x):
        return math.inf if x[1] > 2.0 else float(x.sum())

    with pytest.raises(NumericsError, match="index 1"):
        finite_diff_grad(f, [0.0, 2.0], h=1e-3)


def test_knn_backends_agree():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(300, 3))
    Q = rng.normal(size=(200, 3))
    for excl, ref in ((True, P), (False, Q)):
        a = _kernels_py.knn_kth_distance(P, ref, 4, excl)
        b = kernels.knn_kth_distance(np.ascontiguousarray(P), np.ascontiguousarray(ref), 4, excl)
        np.testing.assert_allclose(a, b, rtol=1e-10)
    # brute force on a few points
    for i in range(5):
        d = np.sort(np.linalg.norm(Q - P[i], axis=1))
        assert b[i] == pytest.approx(d[3])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6))
def test_jacobi_integer_spectrum(n):
    # exact rational oracle: A = Q D Q^T with a Householder Q built from integers
    v = np.arange(1, n + 1, dtype=float)
    Q = np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)
    D = np.arange(n, 0, -1, dtype=float)
    A = Q @ np.diag(D) @ Q.T
    w, _ = sym_eig(0.5 * (A + A.T))
    np.testing.assert_allclose(w, [float(Fraction(int(d))) for d in D], atol=1e-10)
