"""Training loops for the toy tokenizer: masked pretraining and frozen-encoder decoder fine-tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..diffusion.metrics import frechet_distance
from ..numerics import RngStream
from ..pipeline import LatentDataset, write_latents
from . import autodiff as ad
from .data import MaskSpec, ToyImageSet, mask_sample
from .model import MaeModel, aux_target_values, mae_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    steps: int = 500
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_frac: float = 0.02
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay over a named subset of parameters."""

    def __init__(self, params: dict, names, cfg: OptimConfig):
        self.params, self.names, self.cfg = params, list(names), cfg
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for n in self.names:
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = c.beta1 * self.m[n] + (1.0 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1.0 - c.beta2) * g * g
            if lr == 0.0:
                continue
            # decay only matrices, not gains/biases/tokens
            if p.data.ndim >= 2 and n.endswith(".w"):
                p.data = p.data * (1.0 - lr * c.weight_decay)
            p.data = p.data - lr * (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + 1e-8)


def cosine_lr(step: int, total: int, base: float, warmup_frac: float) -> float:
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def _batch_targets(model, data_targets, idx):
    if data_targets is None:
        return None
    return {k: v[idx] for k, v in data_targets.items()}


def precompute_targets(model: MaeModel, data: ToyImageSet):
    return {t: aux_target_values(model.cfg, data.images, t) for t in model.aux}


def train_mae(data: ToyImageSet, model: MaeModel, opt: OptimConfig, rng: RngStream | None = None,
              log_every: int = 1, callback=None):
    """Masked pretraining; returns ``(model, log)`` with one row per logged step."""
    rng = RngStream(opt.seed, 11) if rng is None else rng
    cfg = model.cfg
    targets = precompute_targets(model, data) if model.aux else None
    names = list(model.params)
    optim = AdamW(model.params, names, opt)
    log = []
    n = len(data)
    for step in range(opt.steps):
        idx = rng.choice(n, size=min(opt.batch, n), replace=False)
        mask = mask_sample(cfg.n_patches, cfg.mask_low, cfg.mask_high, rng, batch=len(idx))
        model.zero_grad()
        loss, parts = mae_loss(model, data.images[idx], mask, _batch_targets(model, targets, idx))
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        ad.backward(loss)
        lr = cosine_lr(step, opt.steps, opt.lr, opt.warmup_frac)
        optim.step(lr)
        if step % log_every == 0 or step == opt.steps - 1:
            row = {"step": step, "recon": parts["recon"], "mask_loss": parts["mask_loss"], "lr": lr,
                   "ratio": mask.ratio}
            log.append(row)
            if callback is not None:
                callback(row)
    return model, log


def finetune_decoder(model: MaeModel, data: ToyImageSet, opt: OptimConfig, rng: RngStream | None = None,
                     mask_start: float | None = None, log_every: int = 1):
    """Freeze the encoder and train only the pixel decoder.

    The mask ratio decays linearly from ``mask_start`` (default: the
    model's mask_high) to zero; auxiliary decoders take no part.
    """
    rng = RngStream(opt.seed, 12) if rng is None else rng
    cfg = model.cfg
    start = cfg.mask_high if mask_start is None else mask_start
    optim = AdamW(model.params, model.decoder_names(), opt)
    n = len(data)
    log = []
    for step in range(opt.steps):
        ratio = start * (1.0 - step / opt.steps)
        idx = rng.choice(n, size=min(opt.batch, n), replace=False)
        mask = mask_sample(cfg.n_patches, ratio, ratio, rng, batch=len(idx))
        model.zero_grad()
        loss, parts = mae_loss(model, data.images[idx], mask, use_aux=False, detach_encoder=True)
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        ad.backward(loss)
        lr = cosine_lr(step, opt.steps, opt.lr, opt.warmup_frac)
        optim.step(lr)
        if step % log_every == 0 or step == opt.steps - 1:
            log.append({"step": step, "recon": parts["recon"], "mask_loss": 0.0, "lr": lr, "ratio": ratio})
    model.zero_grad()
    return model, log


def export_latents(model: MaeModel, images, labels=None, path=None) -> LatentDataset:
    ds = LatentDataset(model.latents(images), labels)
    if path is not None:
        write_latents(path, ds)
    return ds


def recon_metrics(model: MaeModel, images, psnr_cap: float = 99.0) -> dict:
    images = np.asarray(images, dtype=np.float64)
    rec = model.reconstruct(images)
    return image_metrics(images, rec, psnr_cap)


def image_metrics(images, rec, psnr_cap: float = 99.0) -> dict:
    mse = float(np.mean((rec - images) ** 2))
    psnr = psnr_cap if mse == 0.0 else min(psnr_cap, 10.0 * math.log10(1.0 / mse))
    n = images.shape[0]
    fd = frechet_distance(images.reshape(n, -1), rec.reshape(n, -1)) if n >= 2 else float("nan")
    return {"mse": mse, "psnr": psnr, "pixel_frechet": fd}
