"""Latent preprocessing (flatten, PCA, standardize), linear probing and LATB1 files."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, softmax, sym_eig

MAGIC = b"LATB1"
_HEADER = struct.Struct("<5sBIII")


class PipelineError(ValueError):
    pass


class FormatError(PipelineError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class LatentDataset:
    """``n`` samples of ``L`` tokens with ``H`` channels each, plus optional labels."""

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise PipelineError(f"latent data must be n x L x H, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise PipelineError("latent data contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.data.shape[0]:
                raise PipelineError("labels are not aligned with samples")
            if self.labels.size and self.labels.min() < 0:
                raise PipelineError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def flatten(ds: LatentDataset) -> np.ndarray:
    return ds.data.reshape(ds.n, ds.tokens * ds.channels)


def unflatten(X, tokens: int, channels: int, labels=None) -> LatentDataset:
    X = np.asarray(X, dtype=np.float64)
    return LatentDataset(X.reshape(X.shape[0], tokens, channels), labels)


def write_latents(path, ds: LatentDataset) -> None:
    flags = 1 if ds.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, flags, ds.n, ds.tokens, ds.channels))
        fh.write(np.ascontiguousarray(ds.data, dtype="<f8").tobytes())
        if ds.labels is not None:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def read_latents(path) -> LatentDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_latents(buf)


def parse_latents(buf: bytes) -> LatentDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, flags, n, L, H = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if flags & ~1:
        raise FormatError(f"unknown flag bits 0x{flags:02x}", 5)
    off = _HEADER.size
    n_vals = n * L * H
    end = off + 8 * n_vals
    if len(buf) < end:
        raise FormatError("truncated latent payload", len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=n_vals, offset=off).astype(np.float64)
    labels = None
    if flags & 1:
        lab_end = end + 4 * n
        if len(buf) < lab_end:
            raise FormatError("truncated label block", len(buf))
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=end).astype(np.int64)
        end = lab_end
    if len(buf) != end:
        raise FormatError("trailing bytes after payload", end)
    return LatentDataset(data.reshape(n, L, H), labels)


@dataclass
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray
    eigvals: np.ndarray
    explained_variance_ratio: float

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def _covariance(X):
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    return 0.5 * (C + C.T)


def pca_fit(X, var_threshold: float = 0.9, output_dim: int | None = None) -> PcaTransform:
    """Keep the fewest leading components whose explained variance reaches the threshold.

    ``output_dim`` overrides the threshold rule (used to give several
    datasets a common dimension).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise PipelineError("pca_fit needs at least two rows")
    if not 0.0 < var_threshold <= 1.0:
        raise PipelineError("var_threshold must be in (0, 1]")
    mean = X.mean(axis=0)
    w, V = sym_eig(_covariance(X))
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if total <= 0.0:
        raise PipelineError("constant data")
    ratios = np.cumsum(w) / total
    if output_dim is None:
        # relative slack keeps threshold=1.0 from chasing rounding noise
        m = int(np.searchsorted(ratios, var_threshold - 1e-12) + 1)
        if var_threshold >= 1.0:
            m = int(np.sum(w > 1e-12 * w[0]))
    else:
        m = int(output_dim)
    m = max(1, min(m, X.shape[1]))
    comps = V[:, :m].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(m), pivot])
    comps *= signs[:, None]
    return PcaTransform(mean, comps, w[:m].copy(), float(ratios[m - 1]))


def pca_apply(t: PcaTransform, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != t.input_dim:
        raise PipelineError(f"dimension mismatch: PCA expects {t.input_dim} columns, got {X.shape[1]}")
    return (X - t.mean) @ t.components.T


@dataclass
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray
    floored: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def standardize_fit_apply(X, floor: float = 1e-8):
    """Column-wise zero mean / unit population variance."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    floored = std < floor
    std = np.where(floored, floor, std)
    stats = StandardizeStats(mean, std, floored)
    Z = stats.apply(X)
    Z[:, floored] = 0.0
    return Z, stats


def preprocess(X, var_threshold=0.9, output_dim=None):
    """Flattened latents -> PCA -> standardize; returns (Z, pca, stats)."""
    pca = pca_fit(X, var_threshold, output_dim)
    Z, stats = standardize_fit_apply(pca_apply(pca, X))
    return Z, pca, stats


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.5
    l2: float = 1e-4
    batch: int = 256
    seed: int = 0
    eval_frac: float = 0.1


@dataclass
class ProbeResult:
    accuracy: float
    weights: np.ndarray
    bias: np.ndarray
    train_accuracy: float


def linear_probe(latents, labels, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Multinomial logistic regression on a seeded 90/10 split; returns eval accuracy."""
    X = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise PipelineError("labels are not aligned with rows")
    classes = np.unique(y)
    if classes.size < 2:
        raise PipelineError("linear probe needs at least two classes")
    n_cls = int(y.max()) + 1
    rng = RngStream(cfg.seed)
    perm = rng.permutation(X.shape[0])
    n_eval = max(1, int(round(cfg.eval_frac * X.shape[0])))
    ev, tr = perm[:n_eval], perm[n_eval:]
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    Xtr, Xev = (X[tr] - mu) / sd, (X[ev] - mu) / sd
    ytr = y[tr]
    W = np.zeros((X.shape[1], n_cls))
    b = np.zeros(n_cls)
    onehot = np.eye(n_cls)[ytr]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(tr))
        for s in range(0, len(tr), cfg.batch):
            idx = order[s:s + cfg.batch]
            p = softmax(Xtr[idx] @ W + b, axis=1)
            g = (p - onehot[idx]) / len(idx)
            W -= cfg.lr * (Xtr[idx].T @ g + cfg.l2 * W)
            b -= cfg.lr * g.sum(axis=0)
    acc = float(np.mean(np.argmax(Xev @ W + b, axis=1) == y[ev]))
    tr_acc = float(np.mean(np.argmax(Xtr @ W + b, axis=1) == ytr))
    return ProbeResult(acc, W / sd[:, None], b - (mu / sd) @ W, tr_acc)
