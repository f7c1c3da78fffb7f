"""Sample-complexity sweep: how many samples mean recovery needs as K grows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..gmm import check_separation, gmm_sample, separation_threshold
from ..numerics import RngStream
from .score import DiffusionError, theory_gmm
from .train import TrainConfig, train_scorenet


@dataclass
class ComplexitySweepConfig:
    k_list: list = field(default_factory=lambda: [2, 4, 8])
    d: int = 8
    eps: float = 0.25
    n_grid: list = field(default_factory=lambda: [2 ** p for p in range(7, 17)])
    trials: int = 5
    b_cap: float = 8.0
    sep_const: float = 4.0
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise DiffusionError("eps must be positive")
        if list(self.n_grid) != sorted(self.n_grid):
            raise DiffusionError("n_grid must be ascending")


def generate_means(k: int, d: int, sep_const: float, b_cap: float, rng: RngStream, max_tries: int = 10000):
    """Means drawn uniformly in the radius-``b_cap`` ball, rejected until pairwise separated."""
    threshold = separation_threshold(sep_const, k, d) if k > 1 else 0.0
    means = []
    for _ in range(max_tries):
        u = rng.normal(d)
        u *= b_cap * rng.uniform() ** (1.0 / d) / np.linalg.norm(u)
        if all(np.linalg.norm(u - m) >= threshold for m in means):
            means.append(u)
            if len(means) == k:
                out = np.array(means)
                if k > 1:
                    assert check_separation(out, sep_const)[0]
                return out
    raise DiffusionError(f"could not place {k} means with separation {threshold:.3f} inside radius {b_cap}")


def complexity_sweep(cfg: ComplexitySweepConfig, rng: RngStream | None = None):
    """For each K, the smallest grid n whose median matched error is at most eps.

    Returns ``(summary_rows, detail_rows)``. Each (K, trial) draws its own
    true means, warm start and one pool of max(n_grid) samples; a grid
    cell uses the first n samples of that pool. Larger n is only tried
    while no smaller n has passed.
    """
    root = RngStream(cfg.seed) if rng is None else rng
    train_cfg = TrainConfig(**{**cfg.train.__dict__, "eps": cfg.eps})
    n_max = max(cfg.n_grid)
    summary, detail = [], []
    for ki, k in enumerate(cfg.k_list):
        setups = []
        for trial in range(cfg.trials):
            base = root.split(1000 * ki + trial)
            truth = theory_gmm(generate_means(k, cfg.d, cfg.sep_const, cfg.b_cap, base.split(0)))
            pool, _ = gmm_sample(truth, n_max, base.split(1))
            setups.append((truth, pool, base))
        n_required = None
        for ni, n in enumerate(cfg.n_grid):
            errs = []
            for trial, (truth, pool, base) in enumerate(setups):
                net, trace = train_scorenet(pool[:n], truth, train_cfg, base.split(2 + ni))
                err = trace.matched_error[-1]
                errs.append(err)
                detail.append({"k": k, "n": n, "trial": trial, "max_matched_error": err,
                               "min_matched_error": trace.min_matched_error[-1]})
            med = float(np.median(errs))
            if med <= cfg.eps:
                n_required = n
                break
        b_max = float(max(np.max(np.linalg.norm(s[0].means, axis=1)) for s in setups))
        summary.append({
            "k": k,
            "d": cfg.d,
            "eps": cfg.eps,
            "n_required": n_required if n_required is not None else "exceeded",
            "median_error_at_n": med,
            "b_max": b_max,
            "theory_scaling": float(k ** 4 * cfg.d ** 5 * b_max ** 6 / cfg.eps ** 2),
        })
    return summary, detail
