"""Gaussian mixture models: EM fitting, likelihood, sampling and diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .numerics import RngStream, as_rng, logsumexp

COV_KINDS = ("identity", "diagonal", "full")
LOG_2PI = math.log(2.0 * math.pi)


class GmmError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    cov_kind: str = "identity"
    covs: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if self.cov_kind not in COV_KINDS:
            raise GmmError(f"unknown cov_kind {self.cov_kind!r}")
        K, d = self.means.shape
        if self.weights.shape != (K,):
            raise GmmError(f"weights has shape {self.weights.shape}, expected ({K},)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise GmmError("weights must be nonnegative and sum to 1")
        if self.cov_kind == "identity":
            self.covs = None
        else:
            self.covs = np.asarray(self.covs, dtype=np.float64)
            want = (K, d) if self.cov_kind == "diagonal" else (K, d, d)
            if self.covs.shape != want:
                raise GmmError(f"covs has shape {self.covs.shape}, expected {want}")
            if self.cov_kind == "diagonal" and np.any(self.covs <= 0):
                raise GmmError("diagonal variances must be positive")
            if self.cov_kind == "full":
                try:
                    np.linalg.cholesky(self.covs)
                except np.linalg.LinAlgError as exc:
                    raise GmmError("full covariances must be positive definite") from exc

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def component_log_density(self, X) -> np.ndarray:
        """N x K matrix of log N(x_n; mu_i, Sigma_i)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise GmmError(f"dimension mismatch: model d={self.d}, data has {X.shape[1]} columns")
        out = np.empty((X.shape[0], self.k))
        for i in range(self.k):
            diff = X - self.means[i]
            if self.cov_kind == "identity":
                maha, logdet = np.einsum("nd,nd->n", diff, diff), 0.0
            elif self.cov_kind == "diagonal":
                var = self.covs[i]
                maha, logdet = np.einsum("nd,nd->n", diff / var, diff), np.sum(np.log(var))
            else:
                L = np.linalg.cholesky(self.covs[i])
                z = solve_triangular(L, diff.T, lower=True)
                maha, logdet = np.einsum("dn,dn->n", z, z), 2.0 * np.sum(np.log(np.diag(L)))
            out[:, i] = -0.5 * (self.d * LOG_2PI + logdet + maha)
        return out

    def log_prob(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self.component_log_density(X) + logw, axis=1)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "cov_kind": self.cov_kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": None if self.covs is None else self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmModel":
        model = cls(doc["weights"], doc["means"], doc["cov_kind"], doc.get("covs"))
        if model.k != doc["k"] or model.d != doc["d"]:
            raise GmmError("k/d fields disagree with parameter shapes")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GmmModel":
        return cls.from_dict(json.loads(text))


@dataclass
class EmConfig:
    k: int
    cov_kind: str = "full"
    max_iter: int = 200
    tol: float = 1e-6
    n_init: int = 3
    init_kind: str = "kmeans++"
    var_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise GmmError("max_iter must be >= 1")
        if self.tol <= 0 or self.var_floor <= 0:
            raise GmmError("tol and var_floor must be positive")
        if self.cov_kind not in COV_KINDS:
            raise GmmError(f"unknown cov_kind {self.cov_kind!r}")
        if self.init_kind not in ("kmeans++", "random-points"):
            raise GmmError(f"unknown init_kind {self.init_kind!r}")


@dataclass
class EmTrace:
    nll: list = field(default_factory=list)
    collapsed: bool = False
    converged: bool = False
    n_iter: int = 0
    restart: int = 0


def gmm_nll(model: GmmModel, data) -> float:
    """Mean negative log-likelihood per sample."""
    return float(-np.mean(model.log_prob(data)))


def _m_step(X, resp, cov_kind, var_floor, prev: GmmModel | None):
    N, d = X.shape
    nk = resp.sum(axis=0)
    K = nk.shape[0]
    collapsed = False
    weights = nk / N
    means = np.empty((K, d))
    covs = None if cov_kind == "identity" else np.empty((K, d) if cov_kind == "diagonal" else (K, d, d))
    for i in range(K):
        if nk[i] < 1e-12:
            # dead component: keep previous parameters, zero weight
            collapsed = True
            means[i] = prev.means[i] if prev is not None else X[0]
            if cov_kind == "diagonal":
                covs[i] = prev.covs[i] if prev is not None else np.ones(d)
            elif cov_kind == "full":
                covs[i] = prev.covs[i] if prev is not None else np.eye(d)
            continue
        r = resp[:, i]
        mu = r @ X / nk[i]
        means[i] = mu
        if cov_kind == "identity":
            continue
        diff = X - mu
        if cov_kind == "diagonal":
            var = r @ (diff * diff) / nk[i]
            if np.any(var < var_floor):
                collapsed = True
                var = np.maximum(var, var_floor)
            covs[i] = var
        else:
            S = (diff * r[:, None]).T @ diff / nk[i]
            S = 0.5 * (S + S.T)
            w, V = np.linalg.eigh(S)
            if w.min() < var_floor:
                collapsed = True
                S = (V * np.maximum(w, var_floor)) @ V.T
                S = 0.5 * (S + S.T)
            covs[i] = S
    weights = weights / weights.sum()
    return GmmModel(weights, means, cov_kind, covs), collapsed


def _init_resp(X, cfg: EmConfig, rng: RngStream) -> np.ndarray:
    N = X.shape[0]
    K = cfg.k
    if cfg.init_kind == "random-points":
        centers = X[rng.choice(N, size=K, replace=False)]
    else:
        idx = [int(rng.integers(N))]
        d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
        for _ in range(1, K):
            total = d2.sum()
            if total <= 0:
                nxt = int(rng.integers(N))
            else:
                nxt = int(rng.choice(N, p=d2 / total))
            idx.append(nxt)
            d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
        centers = X[idx]
    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((N, K))
    resp[np.arange(N), np.argmin(dist, axis=1)] = 1.0
    return resp


def _fit_once(X, cfg: EmConfig, rng: RngStream):
    trace = EmTrace()
    model, collapsed = _m_step(X, _init_resp(X, cfg, rng), cfg.cov_kind, cfg.var_floor, None)
    trace.collapsed |= collapsed
    for it in range(cfg.max_iter):
        comp = model.component_log_density(X)
        with np.errstate(divide="ignore"):
            joint = comp + np.log(model.weights)
        ll = logsumexp(joint, axis=1)
        nll = float(-ll.mean())
        trace.nll.append(nll)
        trace.n_iter = it + 1
        if len(trace.nll) >= 2 and abs(trace.nll[-2] - nll) <= cfg.tol * max(abs(nll), 1.0):
            trace.converged = True
            break
        resp = np.exp(joint - ll[:, None])
        model, collapsed = _m_step(X, resp, cfg.cov_kind, cfg.var_floor, model)
        trace.collapsed |= collapsed
    if not trace.converged:
        trace.nll.append(gmm_nll(model, X))
    return model, trace


def gmm_fit_em(data, cfg: EmConfig):
    """Fit a mixture by EM; best of ``cfg.n_init`` restarts by final NLL.

    Returns ``(model, trace)`` where ``trace.nll`` holds the per-iteration
    mean NLL of the restart that won.
    """
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if not np.all(np.isfinite(X)):
        raise GmmError("data contains non-finite values")
    if cfg.k > X.shape[0]:
        raise GmmError(f"K={cfg.k} exceeds the number of rows ({X.shape[0]})")
    root = RngStream(cfg.seed)
    best = None
    for r in range(cfg.n_init):
        model, trace = _fit_once(X, cfg, root.split(r))
        trace.restart = r
        if best is None or trace.nll[-1] < best[1].nll[-1]:
            best = (model, trace)
    return best


def gmm_sample(model: GmmModel, n: int, rng):
    rng = as_rng(rng)
    labels = rng.choice(model.k, size=n, p=model.weights)
    z = rng.normal((n, model.d))
    out = np.empty((n, model.d))
    for i in range(model.k):
        sel = labels == i
        if not sel.any():
            continue
        if model.cov_kind == "identity":
            out[sel] = model.means[i] + z[sel]
        elif model.cov_kind == "diagonal":
            out[sel] = model.means[i] + z[sel] * np.sqrt(model.covs[i])
        else:
            out[sel] = model.means[i] + z[sel] @ np.linalg.cholesky(model.covs[i]).T
    return out, labels


def nll_sweep(data, k_list, cfg: EmConfig, heldout=None):
    """Fit one mixture per K; rows are (K, train NLL, held-out NLL or None, collapsed)."""
    rows = []
    for k in sorted(set(int(k) for k in k_list)):
        sub = EmConfig(**{**cfg.__dict__, "k": k})
        model, trace = gmm_fit_em(data, sub)
        rows.append(
            {
                "k": k,
                "nll": trace.nll[-1],
                "heldout_nll": None if heldout is None else gmm_nll(model, heldout),
                "collapsed": trace.collapsed,
                "model": model,
            }
        )
    return rows


def max_mean_norm(model: GmmModel) -> float:
    return float(np.max(np.linalg.norm(model.means, axis=1)))


def separation_threshold(C: float, k: int, d: int) -> float:
    return C * math.sqrt(math.log(min(k, d)))


def check_separation(means, C: float):
    """Return ``(ok, min_pairwise_gap, threshold)`` for the mean-separation condition."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    K, d = means.shape
    if K < 2:
        raise GmmError("separation needs at least two components")
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    gap = float(dist[np.triu_indices(K, 1)].min())
    threshold = separation_threshold(C, K, d)
    return gap >= threshold, gap, threshold
