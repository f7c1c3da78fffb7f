"""Finite-difference checks for every analytic gradient in the package."""
from __future__ import annotations

import math
import time

import numpy as np

from .diffusion.score import ScoreNet, dsm_loss, oracle_loss, scorenet_eval, scorenet_grad, theory_gmm
from .mae import autodiff as ad
from .mae.data import gen_toy_dataset, mask_sample
from .mae.layers import Block, rope2d_tables
from .mae.model import MaeConfig, MaeModel, mae_loss
from .numerics import RngStream, finite_diff_grad

OP_TOL = 1e-5
E2E_TOL = 1e-3


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _check_op(fn, inputs, rng):
    """Project ``fn(*inputs)`` on a random direction and compare every input's VJP."""
    leaves = [ad.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    proj = rng.normal(out.shape) if out.shape else np.array(1.0)
    ad.backward(ad.sum_(out * proj))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(v, i=i):
            args = [ad.Tensor(x) for x in inputs]
            args[i] = ad.Tensor(v.reshape(inputs[i].shape))
            return float(np.sum(fn(*args).data * proj))

        num = finite_diff_grad(f, inputs[i].ravel(), h=1e-6)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


def _op_cases(rng):
    r = lambda *s: rng.normal(s)
    cos, sin = rope2d_tables(2, 4)
    idx = np.array([2, 0, 2])
    return [
        ("add", lambda a, b: ad.add(a, b), [r(3, 4), r(4)]),
        ("mul", lambda a, b: ad.mul(a, b), [r(3, 4), r(3, 1)]),
        ("neg", lambda a: ad.neg(a), [r(3, 4)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("gelu", lambda a: ad.gelu(a), [r(3, 4)]),
        ("layernorm", lambda a: ad.layernorm(a), [r(3, 4)]),
        ("softmax_lastdim", lambda a: ad.softmax_lastdim(a), [r(3, 4)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [r(3, 4), r(3, 2)]),
        ("slice", lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [r(3, 4)]),
        ("slice_fancy", lambda a: ad.slice_(a, idx), [r(3, 4)]),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [r(3, 4)]),
        ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [r(2, 3, 4)]),
        ("sum", lambda a: ad.sum_(a, axis=1), [r(3, 4)]),
        ("mean", lambda a: ad.mean(a, axis=0, keepdims=True), [r(3, 4)]),
        ("mse", lambda a, b: ad.mse(a, b), [r(3, 4), r(3, 4)]),
        ("rotate", lambda a: ad.rotate(a, cos, sin), [r(2, 4, 4)]),
    ]


def _block_case(rng):
    params = {}
    blk = Block(params, "b", 8, 2, 2, rng.split(0))
    # 2 heads of dim 4 on a 2x2 grid plus one extra token
    cos, sin = rope2d_tables(2, 4, n_extra=1)
    x = rng.split(1).normal((2, 5, 8))
    names = list(params)

    def fn(xt, *ps):
        local = dict(zip(names, ps))
        return blk(local, xt, cos, sin)

    return fn, [x] + [params[n].data.copy() for n in names]


def _score_cases(rng):
    means = rng.normal((3, 2)) * 2
    X = rng.normal((12, 2)) * 2
    noise = rng.normal(X.shape)
    x = rng.normal(2)
    target = rng.normal(2)
    truth = theory_gmm(means + 0.4 * rng.normal((3, 2)))
    t = 0.3

    def half_sq(m):
        res = scorenet_eval(ScoreNet(m.reshape(3, 2)), x, t) - target
        return 0.5 * float(res @ res)

    res = scorenet_eval(ScoreNet(means), x, t) - target
    cases = [("scorenet_grad", scorenet_grad(ScoreNet(means), x, t, res),
              finite_diff_grad(half_sq, means.ravel()))]
    _, g = dsm_loss(ScoreNet(means), X, t, rng, noise=noise)
    f = lambda m: dsm_loss(ScoreNet(m.reshape(3, 2)), X, t, rng, noise=noise)[0]
    cases.append(("dsm_loss", g, finite_diff_grad(f, means.ravel())))
    _, g = oracle_loss(ScoreNet(means), truth, X, t, with_grad=True)
    f = lambda m: oracle_loss(ScoreNet(m.reshape(3, 2)), truth, X, t)
    cases.append(("oracle_loss", g, finite_diff_grad(f, means.ravel())))
    return cases


def tiny_mae_config(**kw) -> MaeConfig:
    base = dict(image_size=8, patch_size=4, embed_dim=8, latent_tokens=2, latent_dim=3, enc_layers=1,
                dec_layers=1, aux_dec_layers=1, heads=2, mlp_ratio=2, aux_targets=["hog", "pixel"])
    base.update(kw)
    return MaeConfig(**base)


def mae_loss_check(seed: int = 0, per_param: int = 2):
    """End-to-end loss gradient on a tiny model, sampled entries of every parameter."""
    rng = RngStream(seed, 77)
    cfg = tiny_mae_config()
    model = MaeModel(cfg, rng.split(0))
    images = gen_toy_dataset(2, rng.split(1), image_size=cfg.image_size).images
    mask = mask_sample(cfg.n_patches, 0.5, 0.5, rng.split(2), batch=2)
    model.zero_grad()
    loss, _ = mae_loss(model, images, mask)
    ad.backward(loss)
    picker = rng.split(3)
    analytic, numeric = [], []
    h = 1e-5
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for j in picker.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = mae_loss(model, images, mask)[1]["total"]
            flat[j] = old - h
            down = mae_loss(model, images, mask)[1]["total"]
            flat[j] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(grad[j])
    return rel_error(np.array(analytic), np.array(numeric)), len(analytic)


def run_gradcheck(seed: int = 0):
    """Rows of (check, rel_error, tol, passed, seconds)."""
    rng = RngStream(seed, 55)
    rows = []

    def record(name, err, tol, t0):
        rows.append({"check": name, "rel_error": float(err), "tol": tol, "passed": bool(err <= tol),
                     "seconds": time.perf_counter() - t0})

    for name, fn, inputs in _op_cases(rng.split(0)):
        t0 = time.perf_counter()
        record(name, _check_op(fn, inputs, rng.split(1)), OP_TOL, t0)
    t0 = time.perf_counter()
    fn, inputs = _block_case(rng.split(2))
    record("transformer_block", _check_op(fn, inputs, rng.split(3)), OP_TOL, t0)
    for name, a, b in _score_cases(rng.split(4)):
        t0 = time.perf_counter()
        record(name, rel_error(a, b), OP_TOL, t0)
    t0 = time.perf_counter()
    err, _ = mae_loss_check(seed)
    record("mae_loss", err, E2E_TOL, t0)
    return rows


def format_table(rows) -> str:
    lines = [f"{'check':<20} {'rel_error':>11} {'tol':>8}  status"]
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        lines.append(f"{r['check']:<20} {r['rel_error']:11.3e} {r['tol']:8.0e}  {status}")
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    res = run_gradcheck()
    print(format_table(res))
    raise SystemExit(0 if all(r["passed"] for r in res) else 1)
