"""Sample-based distribution distances."""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..numerics import sqrtm_psd, sym_eig
from .score import DiffusionError


def sample_moments(X):
    """Mean and population covariance."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu = X.mean(axis=0)
    Xc = X - mu
    S = Xc.T @ Xc / X.shape[0]
    return mu, 0.5 * (S + S.T)


def frechet_distance(A, B) -> float:
    """Frechet (2-Wasserstein) distance between Gaussian moment fits of two sample sets."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DiffusionError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise DiffusionError("frechet_distance needs at least two rows per set")
    return frechet_from_moments(*sample_moments(A), *sample_moments(B))


def frechet_from_moments(mu_a, S_a, mu_b, S_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    S_a, S_b = np.atleast_2d(S_a), np.atleast_2d(S_b)
    # tr sqrt(S_a S_b) from the symmetric form sqrt(S_a) S_b sqrt(S_a)
    R = sqrtm_psd(S_a)
    M = R @ S_b @ R
    w, _ = sym_eig(0.5 * (M + M.T), tol=1e-6)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(S_a) + np.trace(S_b) - 2.0 * tr_sqrt)
    return max(val, 0.0) if val > -1e-10 else val


def knn_kl(P, Q, k: int = 5) -> float:
    """k-nearest-neighbor estimate of KL(P || Q) from samples.

    ``(d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`` with rho the
    k-th neighbor distance inside P (self excluded) and nu the k-th
    neighbor distance into Q.
    """
    P = np.ascontiguousarray(np.atleast_2d(P), dtype=np.float64)
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=np.float64)
    if P.shape[1] != Q.shape[1]:
        raise DiffusionError(f"dimension mismatch: {P.shape[1]} vs {Q.shape[1]}")
    if P.shape[0] < k + 1 or Q.shape[0] < k + 1:
        raise DiffusionError(f"knn_kl needs at least k+1={k + 1} rows in each sample set")
    n, d = P.shape
    m = Q.shape[0]
    rho = kernels.knn_kth_distance(P, P, k, True)
    nu = kernels.knn_kth_distance(P, Q, k, False)
    tiny = np.finfo(np.float64).tiny
    rho = np.maximum(rho, tiny)
    nu = np.maximum(nu, tiny)
    return float(d * np.mean(np.log(nu / rho)) + math.log(m / (n - 1)))
