"""Exact and parameterized scores for identity-covariance Gaussian mixtures.

Forward noising is the Ornstein-Uhlenbeck process, under which an
equal-weight identity-covariance mixture stays one with means scaled by
``exp(-t)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..gmm import GmmModel
from ..numerics import RngStream, softmax


class DiffusionError(ValueError):
    pass


def theory_gmm(means) -> GmmModel:
    """Equal-weight, identity-covariance mixture."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k = means.shape[0]
    return GmmModel(np.full(k, 1.0 / k), means, "identity")


def assert_theory(gmm: GmmModel) -> None:
    if gmm.cov_kind != "identity":
        raise DiffusionError("theory mixtures must use identity covariance")
    if np.max(np.abs(gmm.weights - 1.0 / gmm.k)) > 1e-12:
        raise DiffusionError("theory mixtures must have equal weights")


def forward_marginal(t: float):
    """``(exp(-t), 1 - exp(-2t))``: signal scale and noise variance at time t."""
    if t < 0:
        raise DiffusionError(f"time must be nonnegative, got {t}")
    return math.exp(-t), -math.expm1(-2.0 * t)


def marginal_gmm(gmm: GmmModel, t: float) -> GmmModel:
    scale, _ = forward_marginal(t)
    return GmmModel(gmm.weights.copy(), gmm.means * scale, "identity")


def forward_noise(x0, t: float, rng: RngStream, noise=None):
    """Draw ``x_t = e^-t x0 + sigma_t zeta``; returns ``(x_t, zeta)``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    scale, sigma2 = forward_marginal(t)
    zeta = rng.normal(x0.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    return scale * x0 + math.sqrt(sigma2) * zeta, zeta


def _weights(x, mt):
    # x: n x d, mt: K x d -> n x K softmax of -|x - m|^2 / 2
    diff = x[:, None, :] - mt[None, :, :]
    return softmax(-0.5 * np.einsum("nkd,nkd->nk", diff, diff), axis=1)


def _mixture_score(means, x, t):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != means.shape[1]:
        raise DiffusionError(f"dimension mismatch: means have d={means.shape[1]}, x has {X.shape[1]}")
    if t < 0:
        raise DiffusionError(f"time must be nonnegative, got {t}")
    mt = means * math.exp(-t)
    w = _weights(X, mt)
    s = w @ mt - X
    return s[0] if single else s


def exact_score(gmm: GmmModel, x, t: float):
    """``grad_x log p_t(x)`` for a theory mixture; x may be a vector or an n x d batch."""
    assert_theory(gmm)
    return _mixture_score(gmm.means, x, t)


def log_density_t(gmm: GmmModel, x, t: float) -> np.ndarray:
    return marginal_gmm(gmm, t).log_prob(np.atleast_2d(x))


@dataclass
class ScoreNet:
    """Score model with one trainable mean per mixture component."""

    means: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64)).copy()
        if not np.all(np.isfinite(self.means)):
            raise DiffusionError("score net means must be finite")

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "ScoreNet":
        return ScoreNet(self.means.copy())

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "d": self.d, "means": self.means.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ScoreNet":
        doc = json.loads(text)
        net = cls(doc["means"])
        if net.k != doc["k"] or net.d != doc["d"]:
            raise DiffusionError("k/d fields disagree with means shape")
        return net

    def score_fn(self):
        return lambda x, t: scorenet_eval(self, x, t)


def scorenet_eval(net: ScoreNet, x, t: float):
    return _mixture_score(net.means, x, t)


def scorenet_grad(net: ScoreNet, x, t: float, residual):
    """Gradient of ``0.5 * |s(x) - target|^2`` w.r.t. the means, given ``residual = s(x) - target``.

    For a batch, returns the mean of the per-row gradients.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    R = np.atleast_2d(np.asarray(residual, dtype=np.float64))
    if X.shape != R.shape or X.shape[1] != net.d:
        raise DiffusionError(f"shape mismatch: x {X.shape}, residual {R.shape}, net d={net.d}")
    decay = math.exp(-t)
    mt = net.means * decay
    w = _weights(X, mt)                      # n x K
    mr = R @ mt.T                            # n x K, m_i . r
    centered = mr - np.sum(w * mr, axis=1, keepdims=True)
    coef = w * centered                      # n x K
    # d/dm_j = w_j r + w_j (m_j.r - sum_i w_i m_i.r)(x - m_j)
    g = w.T @ R + coef.T @ X - coef.sum(axis=0)[:, None] * mt
    return decay * g / X.shape[0]


def dsm_loss(net: ScoreNet, x0_batch, t: float, rng: RngStream, noise=None):
    """Denoising score matching at a fixed time; returns ``(loss, grad)``.

    ``noise`` overrides the Gaussian draw (test hook).
    """
    if t <= 0:
        raise DiffusionError("denoising target undefined at t=0, use oracle_loss")
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if x0.shape[0] == 0:
        raise DiffusionError("empty batch")
    xt, zeta = forward_noise(x0, t, rng, noise)
    sigma = math.sqrt(forward_marginal(t)[1])
    resid = scorenet_eval(net, xt, t) + zeta / sigma
    loss = 0.5 * float(np.mean(np.sum(resid * resid, axis=1)))
    return loss, scorenet_grad(net, xt, t, resid)


def oracle_loss(net: ScoreNet, truth: GmmModel, xt_batch, t: float, with_grad: bool = False):
    """Mean squared distance from the exact score over the batch."""
    X = np.atleast_2d(np.asarray(xt_batch, dtype=np.float64))
    if truth.d != net.d or X.shape[1] != net.d:
        raise DiffusionError("dimension mismatch between net, truth and batch")
    resid = scorenet_eval(net, X, t) - exact_score(truth, X, t)
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not with_grad:
        return loss
    return loss, 2.0 * scorenet_grad(net, X, t, resid)
