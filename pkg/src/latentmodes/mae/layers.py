"""Transformer building blocks on top of the autodiff core."""
from __future__ import annotations

import math

import numpy as np

from ..numerics import RngStream
from . import autodiff as ad
from .autodiff import AutodiffError, Tensor


def param(data, name) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def init_linear(rng: RngStream, fan_in: int, fan_out: int):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal((fan_in, fan_out)) * std, np.zeros(fan_out)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ad.layernorm(x) * gamma + beta


def rope2d_tables(grid: int, head_dim: int, n_extra: int = 0, base: float = 100.0):
    """cos/sin tables for 2D RoPE on a ``grid`` x ``grid`` patch layout.

    The first half of the rotation pairs encodes the column index and the
    second half the row index. ``n_extra`` trailing identity rows cover
    tokens without a spatial position (the latent tokens). Returns arrays
    of shape (grid*grid + n_extra, head_dim // 2).
    """
    if head_dim % 4:
        raise AutodiffError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    pos = np.stack([xs, ys], axis=1).astype(np.float64)
    return rope2d_tables_for(pos, head_dim, n_extra, base)


def rope2d_tables_for(positions, head_dim: int, n_extra: int = 0, base: float = 100.0):
    if head_dim % 4:
        raise AutodiffError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    q = head_dim // 4
    freqs = base ** (-np.arange(q) / q)
    ang = np.concatenate([positions[:, :1] * freqs, positions[:, 1:2] * freqs], axis=1)
    cos, sin = np.cos(ang), np.sin(ang)
    if n_extra:
        cos = np.concatenate([cos, np.ones((n_extra, 2 * q))])
        sin = np.concatenate([sin, np.zeros((n_extra, 2 * q))])
    return cos, sin


def rope2d_apply(x, positions, base: float = 100.0) -> Tensor:
    """Rotate query/key vectors (..., T, head_dim) by their 2D grid positions (T, 2)."""
    x = ad.as_tensor(x)
    cos, sin = rope2d_tables_for(positions, x.shape[-1], 0, base)
    return ad.rotate(x, cos, sin)


class Block:
    """Pre-norm transformer block; parameters live in the owner's dict under ``prefix``."""

    def __init__(self, params: dict, prefix: str, dim: int, heads: int, mlp_ratio: int, rng: RngStream):
        if dim % heads:
            raise AutodiffError(f"embed dim {dim} not divisible by {heads} heads")
        self.prefix, self.dim, self.heads = prefix, dim, heads
        hidden = dim * mlp_ratio
        self.names = {}

        def add(key, value):
            name = f"{prefix}.{key}"
            params[name] = param(value, name)
            self.names[key] = name

        add("ln1.g", np.ones(dim))
        add("ln1.b", np.zeros(dim))
        w, b = init_linear(rng.split(0), dim, 3 * dim)
        add("qkv.w", w)
        add("qkv.b", b)
        w, b = init_linear(rng.split(1), dim, dim)
        add("proj.w", w)
        add("proj.b", b)
        add("ln2.g", np.ones(dim))
        add("ln2.b", np.zeros(dim))
        w, b = init_linear(rng.split(2), dim, hidden)
        add("fc1.w", w)
        add("fc1.b", b)
        w, b = init_linear(rng.split(3), hidden, dim)
        add("fc2.w", w)
        add("fc2.b", b)

    def __call__(self, params: dict, x: Tensor, cos, sin) -> Tensor:
        p = {k: params[v] for k, v in self.names.items()}
        B, T, D = x.shape
        h, dh = self.heads, D // self.heads
        y = layer_norm(x, p["ln1.g"], p["ln1.b"])
        qkv = ad.matmul(y, p["qkv.w"]) + p["qkv.b"]
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        q = ad.rotate(q, cos, sin)
        k = ad.rotate(k, cos, sin)
        att = ad.softmax_lastdim(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)))
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        x = x + (ad.matmul(o, p["proj.w"]) + p["proj.b"])
        y = layer_norm(x, p["ln2.g"], p["ln2.b"])
        y = ad.gelu(ad.matmul(y, p["fc1.w"]) + p["fc1.b"])
        return x + (ad.matmul(y, p["fc2.w"]) + p["fc2.b"])
