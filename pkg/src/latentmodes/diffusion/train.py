"""Gradient-descent training of the mixture score net and mean-recovery metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..gmm import GmmModel
from ..numerics import RngStream
from .score import DiffusionError, ScoreNet, assert_theory, dsm_loss, forward_noise, oracle_loss


def default_iters(eps: float, d: int, c: float = 10.0) -> int:
    """Iteration budget ``ceil(c * log(log(d) / eps))``, at least 1."""
    inner = math.log(max(d, 2)) / eps
    return max(1, math.ceil(c * math.log(max(inner, math.e))))


@dataclass
class TrainConfig:
    n_samples: int = 4096
    iters: int | None = None
    iters_const: float = 10.0
    lr: float = 1.0
    lr_schedule: str = "cosine"
    batch: int | None = None
    t_sampling: str = "fixed"
    t_fixed: float | None = None
    t_range: tuple = (0.05, 1.0)
    eps: float = 0.1
    loss_kind: str = "denoising"
    init_kind: str = "warm"
    warm_radius_const: float = 0.5
    noise_mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise DiffusionError("lr must be nonnegative")
        if self.batch is not None and not 1 <= self.batch <= self.n_samples:
            raise DiffusionError("need n_samples >= batch >= 1")
        if self.t_sampling not in ("fixed", "uniform"):
            raise DiffusionError(f"unknown t_sampling {self.t_sampling!r}")
        if self.loss_kind not in ("oracle", "denoising"):
            raise DiffusionError(f"unknown loss_kind {self.loss_kind!r}")
        if self.init_kind not in ("warm", "perturbed", "random"):
            raise DiffusionError(f"unknown init_kind {self.init_kind!r}")
        if self.noise_mode not in ("fixed", "fresh"):
            raise DiffusionError(f"unknown noise_mode {self.noise_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DiffusionError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def train_time(self) -> float:
        return self.t_fixed if self.t_fixed is not None else max(0.05, self.eps)

    def n_iters(self, d: int) -> int:
        return self.iters if self.iters is not None else default_iters(self.eps, d, self.iters_const)


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    matched_error: list = field(default_factory=list)
    min_matched_error: list = field(default_factory=list)


def matched_mean_error(net: ScoreNet, truth: GmmModel):
    """One-to-one matching of learned to true means (minimum total distance).

    Returns ``(max_err, assignment, min_err)`` where ``assignment[i]`` is the
    truth component matched to learned component i.
    """
    if net.k != truth.k:
        raise DiffusionError(f"component count mismatch: net K={net.k}, truth K={truth.k}")
    diff = net.means[:, None, :] - truth.means[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    rows, cols = linear_sum_assignment(dist)
    matched = dist[rows, cols]
    assignment = np.empty(net.k, dtype=np.int64)
    assignment[rows] = cols
    return float(matched.max()), assignment, float(matched.min())


def warm_radius(const: float, k: int, d: int) -> float:
    m = min(k, d)
    return const * math.sqrt(math.log(m)) if m > 1 else const


def init_means(cfg: TrainConfig, k: int, data, truth: GmmModel | None, rng: RngStream):
    d = data.shape[1]
    if cfg.init_kind == "random":
        return data[rng.choice(data.shape[0], size=k, replace=False)].copy()
    if truth is None:
        raise DiffusionError("warm init without truth means")
    u = rng.normal((k, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = warm_radius(cfg.warm_radius_const, k, d)
    if cfg.init_kind == "perturbed":
        r = r * rng.uniform(0.0, 1.0, size=(k, 1))
    return truth.means + r * u


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def train_scorenet(data, truth: GmmModel | None, cfg: TrainConfig, rng: RngStream, k: int | None = None,
                   init=None):
    """Gradient descent on the score-matching objective at the configured noise time.

    With ``noise_mode="fixed"`` every data point carries one noise draw for
    the whole run, so the objective is a fixed empirical average over n
    (sample, noise) pairs; ``"fresh"`` redraws noise each step.

    Each step moves by ``lr * K * grad``: every component carries about 1/K
    of the data mass, so the scaling keeps per-component step sizes
    independent of K.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if truth is not None:
        assert_theory(truth)
        k = truth.k
    if k is None:
        raise DiffusionError("component count unknown: pass truth or k")
    init_rng, step_rng = rng.split(0), rng.split(1)
    means = np.array(init, dtype=np.float64) if init is not None else init_means(cfg, k, data, truth, init_rng)
    net = ScoreNet(means)
    trace = TrainTrace()
    total = cfg.n_iters(data.shape[1])
    n = data.shape[0]
    batch = n if cfg.batch is None else cfg.batch
    if cfg.loss_kind == "oracle" and truth is None:
        raise DiffusionError("oracle loss needs the true mixture")
    fixed_noise = step_rng.normal(data.shape) if cfg.noise_mode == "fixed" else None
    for it in range(total):
        t = cfg.train_time if cfg.t_sampling == "fixed" else float(step_rng.uniform(*cfg.t_range))
        idx = step_rng.choice(n, size=batch, replace=False) if batch < n else slice(None)
        xb = data[idx]
        noise = None if fixed_noise is None else fixed_noise[idx]
        if cfg.loss_kind == "denoising":
            loss, grad = dsm_loss(net, xb, t, step_rng, noise=noise)
        else:
            xt, _ = forward_noise(xb, t, step_rng, noise)
            loss, grad = oracle_loss(net, truth, xt, t, with_grad=True)
        trace.loss.append(loss)
        if truth is not None:
            hi, _, lo = matched_mean_error(net, truth)
            trace.matched_error.append(hi)
            trace.min_matched_error.append(lo)
        lr = _lr_at(cfg, it, total)
        if lr != 0.0:
            net.means -= lr * k * grad
        if not np.all(np.isfinite(net.means)):
            raise DiffusionError(f"training diverged at iteration {it}")
    if truth is not None:
        hi, _, lo = matched_mean_error(net, truth)
        trace.matched_error.append(hi)
        trace.min_matched_error.append(lo)
    return net, trace
