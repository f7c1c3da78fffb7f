"""Command-line entry point: ``latentmodes <subcommand> [--config F] [--seed N] [--out DIR] [--preset NAME]``.

Config files are INI-style: ``[section]`` headers and ``key = value``
lines, values parsed as Python literals. Unknown sections or keys are
rejected. Every run writes ``<subcommand>.json`` with the config echo,
seed and run id next to its CSV outputs. ``LATENTMODES_OUT`` overrides
the default output directory.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import report
from .diffusion.experiments import SAMPLERS, sampler_fidelity, square_means, warm_start_recovery
from .diffusion.metrics import frechet_distance, knn_kl
from .diffusion.sampling import make_schedule
from .diffusion.score import DiffusionError, ScoreNet, exact_score, theory_gmm
from .diffusion.sweep import ComplexitySweepConfig, complexity_sweep
from .diffusion.train import TrainConfig, train_scorenet
from .gmm import EmConfig, GmmError, gmm_fit_em, gmm_sample, nll_sweep
from .gradcheck import format_table, run_gradcheck
from .mae.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .mae.data import ToyImageSet, gen_toy_dataset
from .mae.model import MaeConfig, MaeModel
from .mae.train import OptimConfig, TrainingDiverged, export_latents, finetune_decoder, recon_metrics, train_mae
from .numerics import NumericsError, RngStream
from .pipeline import (FormatError, LatentDataset, PipelineError, ProbeConfig, flatten, linear_probe, pca_apply,
                       pca_fit, read_latents, standardize_fit_apply, write_latents)
from .report import ConfigError, build, check_sections, dc_fields
from .study import FIG2_HEADER, Fig2Config, run_fig2

COMMANDS = ("gen-data", "train-mae", "finetune-decoder", "export-latents", "gmm-fit", "nll-sweep",
            "train-diffusion", "sample", "eval", "sweep-complexity", "gradcheck", "pipeline")

TRAIN_LOG_HEADER = ["step", "recon", "mask_loss", "lr", "ratio"]
NLL_HEADER = ["source", "k", "nll", "heldout_nll", "collapsed"]
FIDELITY_HEADER = ["steps", "pi_value", "frechet", "frechet_cv", "knn_kl"]
WARM_HEADER = ["seed", "k", "n", "iters", "final_loss", "max_matched_error", "min_matched_error"]
DIFF_LOG_HEADER = ["iter", "loss", "max_matched_error", "min_matched_error"]
SWEEP_HEADER = ["k", "d", "eps", "n_required", "median_error_at_n", "b_max", "theory_scaling"]
SWEEP_DETAIL_HEADER = ["k", "n", "trial", "max_matched_error", "min_matched_error"]
METRICS_HEADER = ["kind", "input_a", "input_b", "metric", "value"]
GRADCHECK_HEADER = ["check", "rel_error", "tol", "passed"]

# sections shared by several subcommands
SECTIONS = {
    "data": {"n", "image_size", "seed", "name"},
    "mae": dc_fields(MaeConfig),
    "optim": dc_fields(OptimConfig),
    "finetune": dc_fields(OptimConfig) | {"mask_start"},
    "em": dc_fields(EmConfig),
    "preprocess": {"enabled", "var_threshold", "output_dim"},
    "sweep": {"k_list", "use_heldout", "heldout_frac"},
    "train": dc_fields(TrainConfig),
    "truth": {"k", "sep", "n"},
    "sampler": {"kind", "schedule", "steps", "T", "delta", "c_const", "n", "noise_scale"},
    "fidelity": {"k", "sep", "steps_list", "n", "T", "delta", "sampler", "schedule", "knn_k", "control_steps"},
    "warmstart": {"k", "sep", "n", "seeds"},
    "complexity": dc_fields(ComplexitySweepConfig) - {"train"},
    "probe": dc_fields(ProbeConfig),
    "eval": {"knn_k", "n_images"},
    "fig2": dc_fields(Fig2Config),
}

ALLOWED = {
    "gen-data": ["data"],
    "train-mae": ["mae", "optim"],
    "finetune-decoder": ["finetune", "data"],
    "export-latents": [],
    "gmm-fit": ["em", "preprocess"],
    "nll-sweep": ["em", "preprocess", "sweep"],
    "train-diffusion": ["train", "preprocess", "truth", "warmstart"],
    "sample": ["sampler", "truth", "fidelity"],
    "eval": ["eval", "probe"],
    "sweep-complexity": ["complexity", "train"],
    "gradcheck": [],
    "pipeline": ["fig2"],
}

PRESETS = {
    "sampler-fidelity": ("sample", {"fidelity": {"k": 4, "sep": 8.0, "steps_list": [25, 100, 200, 400],
                                                  "n": 20000, "delta": 0.01}}),
    "warm-start": ("train-diffusion", {"warmstart": {"k": 2, "sep": 8.0, "n": 8192, "seeds": [0, 1, 2, 3, 4]}}),
    "theory-trend": ("sweep-complexity", {"complexity": {"k_list": [2, 4, 8], "d": 8, "eps": 0.25, "trials": 5}}),
    "paper-fig2": ("pipeline", {"fig2": {}}),
    "smoke-fig2": ("pipeline", {"fig2": {"n_train": 200, "n_heldout": 100, "image_size": 16, "embed_dim": 16,
                                         "latent_tokens": 4, "latent_dim": 4, "enc_layers": 1, "dec_layers": 1,
                                         "aux_dec_layers": 1, "heads": 2, "steps": 20, "k_list": [1, 2, 4],
                                         "diff_k": 2, "diff_iters": 20, "sample_steps": 10, "n_generate": 200,
                                         "probe_epochs": 5}}),
}


class UsageError(Exception):
    pass


def error_category(exc) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (FormatError, CheckpointError)):
        return "format"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (GmmError, DiffusionError, NumericsError, PipelineError)):
        return "invalid-input"
    return "internal"


class Run:
    """Per-invocation context: merged config, seed and output directory."""

    def __init__(self, command, args):
        self.command = command
        self.args = args
        layers = []
        if args.preset:
            owner, values = PRESETS[args.preset]
            if owner != command:
                raise UsageError(f"preset {args.preset!r} belongs to {owner!r}, not {command!r}")
            layers.append(values)
        if args.config:
            if not os.path.exists(args.config):
                raise OSError(f"config file not found: {args.config}")
            layers.append(report.read_config(args.config))
        self.cfg = report.merge(*layers)
        check_sections(self.cfg, {s: SECTIONS[s] for s in ALLOWED[command]})
        self.seed = int(args.seed)
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be a u64")
        self.out = args.out or os.environ.get("LATENTMODES_OUT") or "runs"
        os.makedirs(self.out, exist_ok=True)
        self.outputs = []

    def section(self, name) -> dict:
        return dict(self.cfg.get(name, {}))

    def seeded(self, name) -> dict:
        vals = self.section(name)
        vals.setdefault("seed", self.seed)
        return vals

    def path(self, name) -> str:
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def csv(self, name, rows, header):
        report.write_csv(self.path(name), rows, header)

    def finish(self, results=None, echo=None):
        echo = self.cfg if echo is None else echo
        report.write_summary(self.path(f"{self.command}.json"), self.command, self.seed, echo, results,
                             self.outputs)


def _need(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not os.path.exists(path):
        raise OSError(f"{what} file not found: {path}")
    return path


def load_images(path) -> ToyImageSet:
    try:
        with np.load(path) as z:
            return ToyImageSet(np.asarray(z["images"], dtype=np.float64), np.asarray(z["labels"], dtype=np.int64))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"not an image archive: {exc}", 0) from exc


def _preprocess(run, X):
    pp = run.section("preprocess")
    if not pp.get("enabled", True):
        return X, None
    pca = pca_fit(X, pp.get("var_threshold", 0.9), pp.get("output_dim"))
    Z, stats = standardize_fit_apply(pca_apply(pca, X))
    return Z, pca


# subcommands

def cmd_gen_data(run):
    d = run.seeded("data")
    imgs = gen_toy_dataset(int(d.get("n", 5000)), RngStream(int(d["seed"])), image_size=int(d.get("image_size", 32)))
    path = run.path(f"{d.get('name', 'images')}.npz")
    with open(path, "wb") as fh:
        np.savez(fh, images=imgs.images, labels=imgs.labels)
    run.finish({"n": len(imgs)})


def cmd_train_mae(run):
    data = load_images(_need(run.args.data, "data"))
    mcfg = build(MaeConfig, run.seeded("mae"), image_size=data.images.shape[1])
    opt = build(OptimConfig, run.seeded("optim"))
    model = MaeModel(mcfg, RngStream(mcfg.seed, 10))
    _, log = train_mae(data, model, opt, log_every=max(1, opt.steps // 100))
    save_checkpoint(run.path("model.lmck"), model)
    run.csv("train_log.csv", log, TRAIN_LOG_HEADER)
    run.finish({"final_recon": log[-1]["recon"]}, echo={"mae": mcfg, "optim": opt})


def cmd_finetune(run):
    model = load_checkpoint(_need(run.args.model, "model"))
    data = load_images(_need(run.args.data, "data"))
    ft = run.seeded("finetune")
    mask_start = ft.pop("mask_start", None)
    opt = build(OptimConfig, ft)
    n_eval = min(len(data), 500)
    before = recon_metrics(model, data.images[:n_eval])["mse"]
    _, log = finetune_decoder(model, data, opt, mask_start=mask_start, log_every=max(1, opt.steps // 100))
    after = recon_metrics(model, data.images[:n_eval])["mse"]
    save_checkpoint(run.path("model_ft.lmck"), model)
    run.csv("finetune_log.csv", log, TRAIN_LOG_HEADER)
    run.finish({"recon_mse_before": before, "recon_mse_after": after},
               echo={"finetune": opt, "mask_start": mask_start})


def cmd_export(run):
    model = load_checkpoint(_need(run.args.model, "model"))
    data = load_images(_need(run.args.data, "data"))
    ds = export_latents(model, data.images, data.labels, path=run.path("latents.latb"))
    run.finish({"n": ds.n, "tokens": ds.tokens, "channels": ds.channels})


def cmd_gmm_fit(run):
    X = flatten(read_latents(_need(run.args.latents, "latents")))
    Z, pca = _preprocess(run, X)
    em = run.seeded("em")
    em.setdefault("k", 8)
    cfg = build(EmConfig, em)
    model, trace = gmm_fit_em(Z, cfg)
    with open(run.path("gmm.json"), "w") as fh:
        fh.write(model.to_json())
    run.csv("gmm_trace.csv", [{"iter": i, "nll": v} for i, v in enumerate(trace.nll)], ["iter", "nll"])
    run.finish({"nll": trace.nll[-1], "dim": Z.shape[1], "collapsed": bool(getattr(trace, "collapsed", False))},
               echo={"em": cfg, "preprocess": run.section("preprocess")})


def cmd_nll_sweep(run):
    paths = run.args.latents_list or ([run.args.latents] if run.args.latents else [])
    if not paths:
        raise UsageError("--latents is required")
    sets = [flatten(read_latents(_need(p, "latents"))) for p in paths]
    pp = run.section("preprocess")
    sw = run.section("sweep")
    k_list = sw.get("k_list", [1, 2, 4, 8, 16, 32])
    frac = float(sw.get("heldout_frac", 0.2))
    use_held = bool(sw.get("use_heldout", True))
    thr = pp.get("var_threshold", 0.9)
    # comparison mode: every set is projected to the widest of the per-set 90% dims
    dim = pp.get("output_dim")
    if dim is None and len(sets) > 1:
        dim = max(pca_fit(X, thr).output_dim for X in sets)
    em = run.seeded("em")
    em.setdefault("k", 1)
    cfg = build(EmConfig, em)
    rows = []
    for path, X in zip(paths, sets):
        n_held = int(round(frac * X.shape[0])) if use_held else 0
        perm = RngStream(cfg.seed, 3).permutation(X.shape[0])
        fit_X, held_X = X[perm[n_held:]], X[perm[:n_held]]
        pca = pca_fit(fit_X, thr, dim)
        Z, stats = standardize_fit_apply(pca_apply(pca, fit_X))
        held = stats.apply(pca_apply(pca, held_X)) if n_held else None
        for r in nll_sweep(Z, k_list, cfg, heldout=held):
            rows.append({"source": os.path.basename(path), "k": r["k"], "nll": r["nll"],
                         "heldout_nll": r["heldout_nll"], "collapsed": r["collapsed"]})
    run.csv("nll_sweep.csv", rows, NLL_HEADER)
    run.finish({"dim": dim}, echo={"em": cfg, "sweep": sw, "preprocess": pp})


def cmd_train_diffusion(run):
    if "warmstart" in run.cfg:
        ws = run.section("warmstart")
        tcfg = build(TrainConfig, run.seeded("train"), n_samples=int(ws.get("n", 8192)))
        rows = warm_start_recovery(k=int(ws.get("k", 2)), sep=float(ws.get("sep", 8.0)), n=tcfg.n_samples,
                                   seeds=ws.get("seeds", range(5)), cfg=tcfg)
        run.csv("warm_start.csv", rows, WARM_HEADER)
        med = float(np.median([r["max_matched_error"] for r in rows]))
        run.finish({"median_max_matched_error": med}, echo={"warmstart": ws, "train": tcfg})
        return
    rng = RngStream(run.seed, 7)
    train = run.seeded("train")
    truth = None
    if run.args.latents:
        data, _ = _preprocess(run, flatten(read_latents(_need(run.args.latents, "latents"))))
        k = int(run.section("truth").get("k", 8))
        train.setdefault("init_kind", "random")
    else:
        tr = run.section("truth")
        truth = theory_gmm(square_means(int(tr.get("k", 2)), float(tr.get("sep", 8.0))))
        data, _ = gmm_sample(truth, int(tr.get("n", train.get("n_samples", 4096))), rng.split(0))
        k = truth.k
    tcfg = build(TrainConfig, train, n_samples=data.shape[0])
    net, trace = train_scorenet(data, truth, tcfg, rng.split(1), k=k)
    with open(run.path("scorenet.json"), "w") as fh:
        fh.write(net.to_json())
    rows = []
    for i, loss in enumerate(trace.loss):
        row = {"iter": i, "loss": loss}
        if trace.matched_error:
            row["max_matched_error"] = trace.matched_error[i]
            row["min_matched_error"] = trace.min_matched_error[i]
        rows.append(row)
    run.csv("train_log.csv", rows, DIFF_LOG_HEADER)
    res = {"final_loss": trace.loss[-1]}
    if trace.matched_error:
        res["max_matched_error"] = trace.matched_error[-1]
    run.finish(res, echo={"train": tcfg, "truth": run.section("truth"), "preprocess": run.section("preprocess")})


def cmd_sample(run):
    if "fidelity" in run.cfg:
        f = run.section("fidelity")
        means = square_means(int(f.pop("k", 4)), float(f.pop("sep", 8.0)))
        rows = sampler_fidelity(means, seed=run.seed, **f)
        run.csv("fidelity.csv", rows, FIDELITY_HEADER)
        run.finish({"rows": len(rows)})
        return
    s = run.section("sampler")
    kind = s.get("kind", "exp-integrator")
    if kind not in SAMPLERS:
        raise ConfigError(f"unknown sampler kind {kind!r}")
    if run.args.scorenet:
        with open(_need(run.args.scorenet, "scorenet")) as fh:
            try:
                net = ScoreNet.from_json(fh.read())
            except (ValueError, KeyError) as exc:
                raise FormatError(f"bad score net file: {exc}", 0) from exc
        score, d = net.score_fn(), net.d
    else:
        tr = run.section("truth")
        truth = theory_gmm(square_means(int(tr.get("k", 4)), float(tr.get("sep", 8.0))))
        score, d = (lambda x, t: exact_score(truth, x, t)), truth.d
    sched = make_schedule(s.get("schedule", "exp-decay"), int(s.get("steps", 200)), float(s.get("T", 3.0)),
                          float(s.get("delta", 0.01)), float(s.get("c_const", 1.0)), d=d)
    n = int(s.get("n", 10000))
    X = SAMPLERS[kind](score, sched, n, RngStream(run.seed, 9), noise_scale=float(s.get("noise_scale", 1.0)))
    write_latents(run.path("samples.latb"), LatentDataset(X.reshape(n, 1, d)))
    run.finish({"n": n, "pi_value": sched.pi_value, "violations": int(sched.violations.sum())})


def cmd_eval(run):
    kind = run.args.kind
    if kind is None:
        raise UsageError("eval needs a kind: frechet, kl, lp or recon")
    ev = run.section("eval")
    rows = []
    if kind in ("frechet", "kl"):
        pa, pb = _need(run.args.a, "a"), _need(run.args.b, "b")
        A, B = flatten(read_latents(pa)), flatten(read_latents(pb))
        if kind == "frechet":
            val = frechet_distance(A, B)
        else:
            val = knn_kl(A, B, int(ev.get("knn_k", 5)))
        rows.append({"kind": kind, "input_a": os.path.basename(pa), "input_b": os.path.basename(pb),
                     "metric": kind, "value": val})
    elif kind == "lp":
        pa = _need(run.args.latents or run.args.a, "latents")
        ds = read_latents(pa)
        if ds.labels is None:
            raise PipelineError("linear probe needs labeled latents")
        res = linear_probe(flatten(ds), ds.labels, build(ProbeConfig, run.seeded("probe")))
        rows.append({"kind": kind, "input_a": os.path.basename(pa), "metric": "accuracy", "value": res.accuracy})
    elif kind == "recon":
        pm, pd = _need(run.args.model, "model"), _need(run.args.data, "data")
        model = load_checkpoint(pm)
        data = load_images(pd)
        n = min(len(data), int(ev.get("n_images", 500)))
        for metric, val in recon_metrics(model, data.images[:n]).items():
            rows.append({"kind": kind, "input_a": os.path.basename(pm), "input_b": os.path.basename(pd),
                         "metric": metric, "value": val})
    else:
        raise UsageError(f"unknown eval kind {kind!r}")
    run.outputs.append("metrics.csv")
    report.append_csv(os.path.join(run.out, "metrics.csv"), rows, METRICS_HEADER)
    run.finish({r["metric"]: r["value"] for r in rows})


def cmd_sweep_complexity(run):
    cx = run.seeded("complexity")
    train = build(TrainConfig, run.seeded("train"))
    cfg = build(ComplexitySweepConfig, cx, train=train)
    summary, detail = complexity_sweep(cfg)
    run.csv("complexity_summary.csv", summary, SWEEP_HEADER)
    run.csv("complexity_detail.csv", detail, SWEEP_DETAIL_HEADER)
    run.finish({"n_required": [r["n_required"] for r in summary]}, echo={"complexity": cfg})


def cmd_gradcheck(run):
    rows = run_gradcheck(run.seed)
    print(format_table(rows))
    run.csv("gradcheck.csv", [{k: r[k] for k in GRADCHECK_HEADER} for r in rows], GRADCHECK_HEADER)
    failed = [r["check"] for r in rows if not r["passed"]]
    run.finish({"failed": failed})
    return 0 if not failed else 1


def cmd_pipeline(run):
    if not run.args.preset and "fig2" not in run.cfg:
        raise UsageError("pipeline needs --preset (paper-fig2 or smoke-fig2) or a [fig2] config section")
    cfg = build(Fig2Config, run.seeded("fig2"))
    rows, summary = run_fig2(cfg, log=lambda msg: print(msg, file=sys.stderr, flush=True))
    run.csv("fig2.csv", rows, FIG2_HEADER)
    run.finish(summary, echo={"fig2": cfg})
    for claim, ok in summary["claims"].items():
        print(f"{claim}: {'yes' if ok else 'no'}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-mae": cmd_train_mae,
    "finetune-decoder": cmd_finetune,
    "export-latents": cmd_export,
    "gmm-fit": cmd_gmm_fit,
    "nll-sweep": cmd_nll_sweep,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep-complexity": cmd_sweep_complexity,
    "gradcheck": cmd_gradcheck,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=int, default=0, help="global seed (u64)")
    common.add_argument("--out", help="output directory (default: $LATENTMODES_OUT or ./runs)")
    common.add_argument("--preset", choices=sorted(PRESETS))
    parser = argparse.ArgumentParser(prog="latentmodes", description="Latent-space mode analysis experiments.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-mae", "finetune-decoder", "export-latents", "eval"):
            p.add_argument("--data", help="image archive from gen-data")
        if name in ("finetune-decoder", "export-latents", "eval"):
            p.add_argument("--model", help="model checkpoint")
        if name in ("gmm-fit", "train-diffusion", "eval"):
            p.add_argument("--latents", help="LATB1 latent file")
        if name == "nll-sweep":
            p.add_argument("--latents", dest="latents_list", nargs="+", help="one or more LATB1 files")
        if name == "sample":
            p.add_argument("--scorenet", help="score net JSON (default: exact score of [truth])")
        if name == "eval":
            p.add_argument("kind", nargs="?", choices=["frechet", "kl", "lp", "recon"])
            p.add_argument("--a", help="first sample file")
            p.add_argument("--b", help="second sample file")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("data", "model", "latents", "latents_list", "scorenet", "kind", "a", "b"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        ctx = Run(args.command, args)
        code = HANDLERS[args.command](ctx)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the category line is the contract
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {error_category(exc)}: {msg}", file=sys.stderr)
        return 1
    return int(code or 0)


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
