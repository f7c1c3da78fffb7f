"""Toy 1D-latent-token masked autoencoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..numerics import RngStream
from . import autodiff as ad
from .autodiff import AutodiffError, Tensor
from .data import MaskSpec, hog_batch, patchify, unpatchify
from .layers import Block, init_linear, layer_norm, param, rope2d_tables

ENCODER_PREFIXES = ("patch_embed.", "latent_tokens", "latent_pos", "mask_token", "enc.", "enc_norm.", "latent_head.")
DECODER_PREFIXES = ("dec_tokens", "dec_embed.", "dec_latent_pos", "dec.", "dec_norm.", "pixel_head.")


@dataclass
class MaeConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    latent_tokens: int = 16         # production tokenizers use 128
    latent_dim: int = 8             # production tokenizers use 32
    enc_layers: int = 4
    dec_layers: int = 4
    aux_dec_layers: int = 2         # production uses 3
    heads: int = 4
    mlp_ratio: int = 2
    mask_low: float = 0.40
    mask_high: float = 0.60
    lambda1: float = 1.0            # perceptual weight; the term itself is stubbed to 0
    lambda2: float = 0.4            # adversarial weight; the term itself is stubbed to 0
    aux_targets: list = field(default_factory=lambda: ["hog"])
    hog_bins: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_low <= self.mask_high < 1.0:
            raise ValueError("need 0 <= mask_low <= mask_high < 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        for t in self.aux_targets:
            if t not in ("pixel", "hog"):
                raise ValueError(f"unknown aux target {t!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * 3

    def target_dim(self, target: str) -> int:
        return self.patch_dim if target == "pixel" else self.hog_bins

    def to_dict(self) -> dict:
        return asdict(self)


class MaeModel:
    def __init__(self, cfg: MaeConfig, rng: RngStream | None = None):
        self.cfg = cfg
        rng = RngStream(cfg.seed) if rng is None else rng
        D, H, L, N = cfg.embed_dim, cfg.latent_dim, cfg.latent_tokens, cfg.n_patches
        P = self.params = {}

        def add(name, value):
            P[name] = param(value, name)

        w, b = init_linear(rng.split(1), cfg.patch_dim, D)
        add("patch_embed.w", w)
        add("patch_embed.b", b)
        add("latent_tokens", 0.02 * rng.split(2).normal((L, D)))
        add("latent_pos", 0.02 * rng.split(3).normal((L, D)))
        add("mask_token", 0.02 * rng.split(4).normal(D))
        self.enc_blocks = [Block(P, f"enc.{i}", D, cfg.heads, cfg.mlp_ratio, rng.split(100 + i))
                           for i in range(cfg.enc_layers)]
        add("enc_norm.g", np.ones(D))
        add("enc_norm.b", np.zeros(D))
        w, b = init_linear(rng.split(5), D, H)
        add("latent_head.w", w)
        add("latent_head.b", b)

        self.dec_blocks = self._decoder(P, "", cfg.dec_layers, cfg.patch_dim, rng.split(6))
        self.aux = {}
        for j, target in enumerate(cfg.aux_targets):
            self.aux[target] = self._decoder(P, f"aux.{target}.", cfg.aux_dec_layers, cfg.target_dim(target),
                                             rng.split(200 + j))
        self.cos, self.sin = rope2d_tables(cfg.grid, D // cfg.heads, n_extra=L)

    def _decoder(self, P, prefix, layers, out_dim, rng):
        cfg = self.cfg
        D, H, L, N = cfg.embed_dim, cfg.latent_dim, cfg.latent_tokens, cfg.n_patches
        head = "pixel_head" if not prefix else f"{prefix}head"
        P[f"{prefix}dec_tokens"] = param(0.02 * rng.split(0).normal((N, H)), f"{prefix}dec_tokens")
        P[f"{prefix}dec_latent_pos"] = param(0.02 * rng.split(1).normal((L, H)), f"{prefix}dec_latent_pos")
        w, b = init_linear(rng.split(2), H, D)
        P[f"{prefix}dec_embed.w"], P[f"{prefix}dec_embed.b"] = param(w, f"{prefix}dec_embed.w"), param(b, f"{prefix}dec_embed.b")
        blocks = [Block(P, f"{prefix}dec.{i}", D, cfg.heads, cfg.mlp_ratio, rng.split(10 + i)) for i in range(layers)]
        P[f"{prefix}dec_norm.g"] = param(np.ones(D), f"{prefix}dec_norm.g")
        P[f"{prefix}dec_norm.b"] = param(np.zeros(D), f"{prefix}dec_norm.b")
        w, b = init_linear(rng.split(3), D, out_dim)
        P[f"{head}.w"], P[f"{head}.b"] = param(w, f"{head}.w"), param(b, f"{head}.b")
        return {"prefix": prefix, "blocks": blocks, "head": head}

    # parameter groups

    def encoder_names(self):
        return [n for n in self.params if n.startswith(ENCODER_PREFIXES)]

    def decoder_names(self):
        return [n for n in self.params if n.startswith(DECODER_PREFIXES)]

    def aux_names(self):
        return [n for n in self.params if n.startswith("aux.")]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) ^ set(state)
        if missing:
            raise AutodiffError(f"state dict keys differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise AutodiffError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # forward passes

    def encode(self, images, mask: MaskSpec | None = None, detach: bool = False) -> Tensor:
        cfg, P = self.cfg, self.params
        images = np.asarray(images, dtype=np.float64)
        B = images.shape[0]
        patches = patchify(images, cfg.patch_size)
        if patches.shape[1] != cfg.n_patches:
            raise AutodiffError(f"encode: expected {cfg.n_patches} patches, got {patches.shape[1]}")
        x = ad.matmul(Tensor(patches), P["patch_embed.w"]) + P["patch_embed.b"]
        if mask is not None and mask.indicator.any():
            M = np.asarray(mask.indicator, dtype=np.float64)
            if M.shape[-1] != cfg.n_patches:
                raise AutodiffError(f"encode: mask length {M.shape[-1]} != {cfg.n_patches} patches")
            M = M[..., None]
            x = x * (1.0 - M) + ad.mul(P["mask_token"], M)
        z = (P["latent_tokens"] + P["latent_pos"]) + np.zeros((B, cfg.latent_tokens, cfg.embed_dim))
        seq = ad.concat([x, z], axis=1)
        for blk in self.enc_blocks:
            seq = blk(P, seq, self.cos, self.sin)
        out = layer_norm(seq[:, cfg.n_patches:], P["enc_norm.g"], P["enc_norm.b"])
        h = ad.matmul(out, P["latent_head.w"]) + P["latent_head.b"]
        return h.detach() if detach else h

    def _run_decoder(self, dec, h: Tensor) -> Tensor:
        cfg, P, pre = self.cfg, self.params, dec["prefix"]
        h = ad.as_tensor(h)
        if h.ndim != 3 or h.shape[1:] != (cfg.latent_tokens, cfg.latent_dim):
            raise AutodiffError(f"decoder expects latents (B, {cfg.latent_tokens}, {cfg.latent_dim}), got {h.shape}")
        B = h.shape[0]
        e = P[f"{pre}dec_tokens"] + np.zeros((B, cfg.n_patches, cfg.latent_dim))
        seq = ad.concat([e, h + P[f"{pre}dec_latent_pos"]], axis=1)
        seq = ad.matmul(seq, P[f"{pre}dec_embed.w"]) + P[f"{pre}dec_embed.b"]
        for blk in dec["blocks"]:
            seq = blk(P, seq, self.cos, self.sin)
        out = layer_norm(seq[:, :cfg.n_patches], P[f"{pre}dec_norm.g"], P[f"{pre}dec_norm.b"])
        return ad.matmul(out, P[f"{dec['head']}.w"]) + P[f"{dec['head']}.b"]

    def decode_patches(self, h) -> Tensor:
        return self._run_decoder(self.dec_blocks, h)

    def decode_pixels(self, h) -> np.ndarray:
        return unpatchify(self.decode_patches(h).data, self.cfg.patch_size)

    def decode_aux(self, target: str, h) -> Tensor:
        if target not in self.aux:
            raise AutodiffError(f"no auxiliary decoder for target {target!r}")
        return self._run_decoder(self.aux[target], h)

    def latents(self, images, batch: int = 250) -> np.ndarray:
        """Zero-mask latents, (n, L, H)."""
        out = [self.encode(images[s:s + batch]).data for s in range(0, len(images), batch)]
        return np.concatenate(out, axis=0)

    def reconstruct(self, images, batch: int = 250) -> np.ndarray:
        out = [self.decode_pixels(self.encode(images[s:s + batch], detach=True)) for s in range(0, len(images), batch)]
        return np.concatenate(out, axis=0)


def aux_target_values(cfg: MaeConfig, images, target: str):
    if target == "pixel":
        return patchify(np.asarray(images, dtype=np.float64), cfg.patch_size)
    return hog_batch(images, cfg.patch_size, cfg.hog_bins)


def mae_loss(model: MaeModel, images, mask: MaskSpec | None, targets: dict | None = None,
             use_aux: bool = True, detach_encoder: bool = False):
    """Pixel MSE over the whole image plus masked-position aux feature MSE.

    Returns ``(total, parts)``; ``parts`` holds float values of recon,
    mask_loss and the zero perceptual/adversarial stubs.
    """
    cfg = model.cfg
    images = np.asarray(images, dtype=np.float64)
    h = model.encode(images, mask, detach=detach_encoder)
    recon = ad.mse(model.decode_patches(h), Tensor(patchify(images, cfg.patch_size)))
    total = recon
    mask_loss_value = 0.0
    if use_aux and model.aux and mask is not None and mask.indicator.any():
        M = np.broadcast_to(np.asarray(mask.indicator, dtype=np.float64), (images.shape[0], cfg.n_patches))
        count = M.sum()
        terms = []
        for target in model.aux:
            y = targets[target] if targets is not None else aux_target_values(cfg, images, target)
            diff = (model.decode_aux(target, h) - Tensor(y)) * M[..., None]
            terms.append(ad.sum_(diff * diff) * (1.0 / (count * cfg.target_dim(target))))
        mask_term = terms[0]
        for t in terms[1:]:
            mask_term = mask_term + t
        total = total + mask_term
        mask_loss_value = float(mask_term.data)
    # perceptual and adversarial terms need pretrained/adversarial nets: fixed at zero
    percep = adv = 0.0
    parts = {"recon": float(recon.data), "mask_loss": mask_loss_value,
             "percep": percep, "adv": adv, "total": float(total.data) + cfg.lambda1 * percep + cfg.lambda2 * adv}
    return total, parts
