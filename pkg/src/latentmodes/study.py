"""Masked vs unmasked tokenizer study on the toy image set.

Trains two identically sized autoencoders, one with token masking and a
HOG auxiliary decoder and one without either, then compares their latent
spaces: GMM fit quality against K, a mixture-score diffusion model fitted
to each, and a linear probe.
"""
from __future__ import annotations

from dataclasses import dataclass, field


from .diffusion.metrics import frechet_distance
from .diffusion.sampling import make_schedule
from .diffusion.experiments import SAMPLERS
from .diffusion.score import dsm_loss
from .diffusion.train import TrainConfig, train_scorenet
from .gmm import EmConfig, nll_sweep
from .mae.data import gen_toy_dataset
from .mae.model import MaeConfig, MaeModel
from .mae.train import OptimConfig, recon_metrics, train_mae
from .numerics import RngStream
from .pipeline import ProbeConfig, linear_probe, pca_apply, pca_fit, standardize_fit_apply

FIG2_HEADER = ["tokenizer", "metric", "k", "value"]


@dataclass
class Fig2Config:
    n_train: int = 5000
    n_heldout: int = 1000
    image_size: int = 32
    embed_dim: int = 32
    latent_tokens: int = 16
    latent_dim: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    aux_dec_layers: int = 1
    heads: int = 4
    mask_low: float = 0.4
    mask_high: float = 0.6
    aux_targets: list = field(default_factory=lambda: ["hog"])
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    var_threshold: float = 0.9
    k_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    cov_kind: str = "full"
    em_max_iter: int = 100
    em_n_init: int = 1
    diff_k: int = 8
    diff_iters: int = 300
    diff_t: float = 0.3
    diff_lr: float = 0.5
    sample_steps: int = 100
    n_generate: int = 1000
    probe_epochs: int = 100
    seed: int = 0

    def tokenizer_configs(self):
        shared = dict(image_size=self.image_size, embed_dim=self.embed_dim, latent_tokens=self.latent_tokens,
                      latent_dim=self.latent_dim, enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                      aux_dec_layers=self.aux_dec_layers, heads=self.heads, seed=self.seed)
        masked = MaeConfig(mask_low=self.mask_low, mask_high=self.mask_high, aux_targets=list(self.aux_targets),
                           **shared)
        plain = MaeConfig(mask_low=0.0, mask_high=0.0, aux_targets=[], **shared)
        return {"masked": masked, "plain": plain}


def k_to_reach(rows, target: float):
    """Smallest K whose training NLL is at or below ``target``; None if none does."""
    hits = [r["k"] for r in rows if r["nll"] <= target]
    return min(hits) if hits else None


def run_fig2(cfg: Fig2Config, log=None):
    """Returns ``(rows, summary)``; rows follow FIG2_HEADER."""
    say = log or (lambda msg: None)
    root = RngStream(cfg.seed)
    train = gen_toy_dataset(cfg.n_train, root.split(0), image_size=cfg.image_size)
    held = gen_toy_dataset(cfg.n_heldout, root.split(1), image_size=cfg.image_size)
    opt = OptimConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.lr, seed=cfg.seed)

    flat, flat_held, rows = {}, {}, []
    for name, mcfg in cfg.tokenizer_configs().items():
        model = MaeModel(mcfg, root.split(10))
        # both tokenizers start from the same seed streams
        train_mae(train, model, opt, root.split(11), log_every=max(1, cfg.steps // 10),
                  callback=lambda r, name=name: say(f"{name} step {r['step']} recon {r['recon']:.5f}"))
        rec = recon_metrics(model, held.images)
        rows.append({"tokenizer": name, "metric": "recon_mse", "value": rec["mse"]})
        flat[name] = model.latents(train.images).reshape(cfg.n_train, -1)
        flat_held[name] = model.latents(held.images).reshape(cfg.n_heldout, -1)

    # comparison mode: one PCA width for both, the larger of the two 90% dims
    pcas = {name: pca_fit(X, cfg.var_threshold) for name, X in flat.items()}
    common = max(p.output_dim for p in pcas.values())
    Z, Z_held = {}, {}
    for name, X in flat.items():
        pca = pca_fit(X, output_dim=common)
        Z[name], stats = standardize_fit_apply(pca_apply(pca, X))
        Z_held[name] = stats.apply(pca_apply(pca, flat_held[name]))
        rows.append({"tokenizer": name, "metric": "pca_dim", "value": pcas[name].output_dim})
    say(f"common latent dim {common}")

    sweeps = {}
    em = EmConfig(1, cov_kind=cfg.cov_kind, max_iter=cfg.em_max_iter, n_init=cfg.em_n_init, seed=cfg.seed)
    for name in Z:
        sweeps[name] = nll_sweep(Z[name], cfg.k_list, em, heldout=Z_held[name])
        for r in sweeps[name]:
            rows.append({"tokenizer": name, "metric": "nll", "k": r["k"], "value": r["nll"]})
            rows.append({"tokenizer": name, "metric": "heldout_nll", "k": r["k"], "value": r["heldout_nll"]})
        say(f"{name} nll " + " ".join(f"{r['k']}:{r['nll']:.3f}" for r in sweeps[name]))
    target = sweeps["plain"][-1]["nll"]
    reach = {name: k_to_reach(sweeps[name], target) for name in sweeps}
    for name, k in reach.items():
        rows.append({"tokenizer": name, "metric": "k_to_target", "value": k if k is not None else "exceeded"})

    diff = {}
    tcfg = TrainConfig(n_samples=cfg.n_train, iters=cfg.diff_iters, lr=cfg.diff_lr, t_fixed=cfg.diff_t,
                       init_kind="random", seed=cfg.seed)
    sched = make_schedule("exp-decay", cfg.sample_steps, 3.0, 0.01, d=common)
    for name in Z:
        net, trace = train_scorenet(Z[name], None, tcfg, root.split(20), k=cfg.diff_k)
        gen = SAMPLERS["exp-integrator"](net.score_fn(), sched, cfg.n_generate, root.split(21))
        val, _ = dsm_loss(net, Z_held[name], cfg.diff_t, root.split(22))
        diff[name] = {"loss": trace.loss[-1], "heldout_loss": val, "frechet": frechet_distance(gen, Z_held[name])}
        for key, metric in (("loss", "diffusion_loss"), ("heldout_loss", "diffusion_heldout_loss"),
                            ("frechet", "diffusion_frechet")):
            rows.append({"tokenizer": name, "metric": metric, "k": cfg.diff_k, "value": diff[name][key]})
        say(f"{name} diffusion {diff[name]}")

    probe = {}
    for name in Z:
        res = linear_probe(flat[name], train.labels, ProbeConfig(epochs=cfg.probe_epochs, seed=cfg.seed))
        probe[name] = res.accuracy
        rows.append({"tokenizer": name, "metric": "lp_accuracy", "value": res.accuracy})
        say(f"{name} probe {res.accuracy:.4f}")

    nll_at = {name: {r["k"]: r["nll"] for r in s} for name, s in sweeps.items()}
    summary = {
        "common_dim": common,
        "target_nll": target,
        "k_to_target": reach,
        "nll_crossover": [k for k in cfg.k_list if nll_at["masked"][k] < nll_at["plain"][k]],
        "diffusion": diff,
        "lp_accuracy": probe,
        "claims": {
            "fewer_components": reach["masked"] is not None and reach["plain"] is not None
            and reach["masked"] < reach["plain"],
            "lower_diffusion_loss": diff["masked"]["loss"] < diff["plain"]["loss"],
            "lower_frechet": diff["masked"]["frechet"] < diff["plain"]["frechet"],
            "higher_probe": probe["masked"] > probe["plain"],
        },
    }
    return rows, summary
