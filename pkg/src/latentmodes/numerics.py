"""Dense numerics shared by every module.

Matrices are plain float64 numpy arrays. Random numbers come from
counter-based Philox streams keyed by ``(seed, stream_id)`` so that a
stream can be split without touching its parent.
"""
from __future__ import annotations

import numpy as np

from . import kernels

_MASK64 = (1 << 64) - 1


class NumericsError(ValueError):
    pass


def logsumexp(v, axis=None):
    """Max-shifted ``log(sum(exp(v)))``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericsError("empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericsError("empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


JACOBI_MAX_DIM = 256


def sym_eig(A, tol=1e-10):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors
    as columns. Matrices larger than ``JACOBI_MAX_DIM`` go to LAPACK.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NumericsError(f"sym_eig needs a square matrix, got shape {A.shape}")
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    if np.abs(A - A.T).max(initial=0.0) > tol * scale:
        raise NumericsError("sym_eig: matrix is not symmetric within tolerance")
    A = 0.5 * (A + A.T)
    if A.shape[0] > JACOBI_MAX_DIM:
        w, V = np.linalg.eigh(A)
    else:
        w, V, _ = kernels.jacobi_eigh(np.ascontiguousarray(A))
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def sqrtm_psd(A):
    """Principal square root of a symmetric PSD matrix (negative eigenvalues clipped)."""
    w, V = sym_eig(A, tol=1e-8)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A Philox stream keyed by ``(seed, stream_id)``.

    Draws advance the stream's counter. ``split`` derives an independent
    child stream and never consumes from the parent, so parallel work
    gets identical numbers regardless of scheduling.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)
        bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64), counter=self.counter)
        self._gen = np.random.Generator(bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def split(self, index: int) -> "RngStream":
        child = _splitmix64(self.stream_id ^ _splitmix64(int(index) + 1))
        return RngStream(self.seed, child)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


def gaussian_draw(rng: RngStream, n: int, d: int) -> np.ndarray:
    if n < 0 or d < 1:
        raise NumericsError(f"gaussian_draw needs n >= 0, d >= 1 (got {n}, {d})")
    return rng.normal((n, d))


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"finite_diff_grad: non-finite function value at index {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)
