"""Reverse-time schedules and samplers for the OU forward process."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream
from .score import DiffusionError


@dataclass
class ScheduleTable:
    grid: np.ndarray          # t_0 = T > t_1 > ... > t_N = delta
    steps: np.ndarray         # h_k = t_{k-1} - t_k
    sigma2: np.ndarray        # 1 - exp(-2 t) at each grid point
    pi_value: float
    c_const: float
    d: int
    violations: np.ndarray    # step k violates h_k / sigma2_{k-1} <= 1 / (C d)
    warnings: tuple = ()

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]


def make_schedule(kind: str, n: int, T: float, delta: float, c_const: float = 1.0, d: int = 1) -> ScheduleTable:
    """Reverse-time grid from T down to the early-stopping time ``delta``.

    ``uniform`` uses equal steps. ``exp-decay`` is geometric in t, so each
    step is a fixed fraction of the current time and h_k tracks
    sigma^2 ~ 2t as t approaches delta.
    """
    if delta <= 0:
        raise DiffusionError("delta must be positive (sigma_delta = 0 makes Pi undefined)")
    if T <= delta:
        raise DiffusionError(f"need T > delta, got T={T}, delta={delta}")
    if n < 1:
        raise DiffusionError("need at least one step")
    k = np.arange(n + 1)
    if kind == "uniform":
        grid = T - (T - delta) * k / n
    elif kind == "exp-decay":
        grid = T * (delta / T) ** (k / n)
    else:
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    grid[0], grid[-1] = T, delta
    steps = grid[:-1] - grid[1:]
    sigma2 = -np.expm1(-2.0 * grid)
    ratio = steps / sigma2[:-1]
    pi_value = float(np.sum(ratio * ratio))
    notes = []
    if T < 2:
        notes.append(f"T={T} is below the T >= 2 validity range")
    if delta > 0.5:
        notes.append(f"delta={delta} is above the delta <= 1/2 validity range")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return ScheduleTable(grid, steps, sigma2, pi_value, c_const, d, ratio > 1.0 / (c_const * d), tuple(notes))


def _check(x, k):
    if not np.all(np.isfinite(x)):
        raise DiffusionError(f"sampler produced non-finite state at step {k}")


def nested_noise(coarse: ScheduleTable, fine: ScheduleTable, n: int, rng: RngStream):
    """Standard normals for ``coarse`` built from the Brownian path of ``fine``.

    Every point of the coarse grid must also lie on the fine grid. Fine step
    j draws from ``rng.split(j)``; a coarse step sums the fine increments it
    covers, so samplers run on nested grids see one shared noise path.
    """
    pos = np.searchsorted(-fine.grid, -coarse.grid)
    pos = np.clip(pos, 0, fine.grid.size - 1)
    if not np.allclose(fine.grid[pos], coarse.grid, rtol=1e-12, atol=0.0):
        raise DiffusionError("coarse grid is not contained in the fine grid")

    def draw(k, shape):
        a, b = pos[k], pos[k + 1]
        acc = np.zeros(shape)
        for j in range(a, b):
            acc += math.sqrt(fine.steps[j]) * rng.split(j).normal(shape)
        return acc / math.sqrt(coarse.steps[k])

    return draw


def _start(sched, n, rng, x_init):
    return rng.normal((n, sched.d)) if x_init is None else np.array(x_init, dtype=np.float64)


def sample_euler_maruyama(score, sched: ScheduleTable, n: int, rng: RngStream, noise_scale: float = 1.0,
                          x_init=None, noise=None):
    """Euler-Maruyama on dx = (x + 2 s(x, t)) dt + sqrt(2) dW in reverse time.

    ``noise(k, shape)`` replaces the per-step standard normal draws.
    """
    x = _start(sched, n, rng, x_init)
    if x.shape[0] == 0:
        return x
    for k in range(sched.n_steps):
        h, t = sched.steps[k], sched.grid[k]
        z = rng.normal(x.shape) if noise is None else noise(k, x.shape)
        x = x + h * (x + 2.0 * score(x, t)) + noise_scale * math.sqrt(2.0 * h) * z
        _check(x, k)
    return x


def sample_exp_integrator(score, sched: ScheduleTable, n: int, rng: RngStream, noise_scale: float = 1.0,
                          x_init=None, noise=None):
    """Exponential integrator: linear drift integrated exactly, score frozen at the step start."""
    x = _start(sched, n, rng, x_init)
    if x.shape[0] == 0:
        return x
    for k in range(sched.n_steps):
        h, t = sched.steps[k], sched.grid[k]
        eh = math.exp(h)
        z = rng.normal(x.shape) if noise is None else noise(k, x.shape)
        x = eh * x + 2.0 * math.expm1(h) * score(x, t) + noise_scale * math.sqrt(math.expm1(2.0 * h)) * z
        _check(x, k)
    return x
