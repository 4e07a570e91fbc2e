"""Contrastive training of the latent feature extractor used to key the KB.

A latent ``x_k`` is first projected back to data space with one denoiser
call (the standard x0 reconstruction from predicted noise), then embedded by
a small dense net ``h`` and L2-normalized. Training is SimCLR-style: two
augmented views per anchor, other anchors' views serve as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoisePredictor, VarianceSchedule, forward_diffuse, predict_x0
from .nn import AdamState, DenseNet, adam_step


@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    rotation_max_radians: float = 0.0
    flip_axes: tuple[bool, ...] = ()

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo > hi:
            raise ValueError("scale_range must satisfy lo <= hi")
        vals = [self.jitter_sigma, lo, hi, self.rotation_max_radians]
        if not np.all(np.isfinite(vals)) or self.jitter_sigma < 0:
            raise ValueError("augmentation magnitudes must be finite, jitter >= 0")
        if self.rotation_max_radians < 0:
            raise ValueError("rotation_max_radians must be >= 0")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    negatives_per_anchor: int | None = None  # None: batch - 1
    similarity: str = "cosine"
    k_timestep: int = 80
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 2e-3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.similarity != "cosine":
            raise ValueError("only cosine similarity is supported")
        if self.negatives_per_anchor is not None and self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be >= 1")


def augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """jitter, then scale, then rotate (2-D only), then flip. Rows independent."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = np.atleast_2d(x).copy()
    n, d = out.shape
    if cfg.jitter_sigma > 0:
        out += cfg.jitter_sigma * rng.standard_normal(out.shape)
    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        out *= rng.uniform(lo, hi, size=(n, 1))
    if cfg.rotation_max_radians > 0 and d == 2:
        theta = rng.uniform(-cfg.rotation_max_radians, cfg.rotation_max_radians, n)
        out = rotate2d(out, theta)
    for axis, flip in enumerate(cfg.flip_axes):
        if flip:
            sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            out[:, axis] *= sign
    return out[0] if single else out


def rotate2d(x: np.ndarray, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    x = np.atleast_2d(x)
    return np.stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]], axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm feature has no cosine similarity")
    return v / norm


def infonce_loss(anchor, positive, negatives, temperature: float) -> float:
    a = _unit(np.asarray(anchor, dtype=np.float64))
    p = _unit(np.asarray(positive, dtype=np.float64))
    negs = _unit(np.atleast_2d(np.asarray(negatives, dtype=np.float64)))
    logits = np.concatenate([[a @ p], negs @ a]) / temperature
    top = logits.max()
    return float(top + np.log(np.sum(np.exp(logits - top))) - logits[0])


def extract_features(
    h: DenseNet, denoiser: NoisePredictor, x_k, k: int, schedule: VarianceSchedule, y=None
) -> np.ndarray:
    """Unit-norm ``h(x0_hat(x_k, k))`` for one latent or a batch."""
    x0_hat = predict_x0(denoiser, x_k, k, schedule, y)
    return _unit(h.forward(x0_hat))


extract_feature = extract_features


def _batch_loss_and_grad(
    h: DenseNet,
    anchors_in: np.ndarray,
    positives_in: np.ndarray,
    temperature: float,
    mask: np.ndarray | None,
    need_grad: bool = True,
):
    """Mean InfoNCE over anchors; logits[i, j] = sim(a_i, p_j) / tau."""
    n = len(anchors_in)
    out, cache = h.forward_cached(np.concatenate([anchors_in, positives_in]))
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("extractor produced a zero feature")
    z = out / norm
    za, zp = z[:n], z[n:]
    logits = za @ zp.T / temperature
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    softmax = ex / ex.sum(axis=1, keepdims=True)
    loss = float(np.mean(top[:, 0] + np.log(ex.sum(axis=1)) - np.diag(logits)))
    if not need_grad:
        return loss, None
    d_logits = (softmax - np.eye(n)) / (n * temperature)
    d_za = d_logits @ zp
    d_zp = d_logits.T @ za
    d_z = np.concatenate([d_za, d_zp])
    # Through the normalization z = u / |u|.
    d_out = (d_z - z * np.sum(d_z * z, axis=1, keepdims=True)) / norm
    grad, _ = h.backward(cache, d_out, per_example=False)
    return loss, grad


def _negative_mask(n: int, n_neg: int | None, rng) -> np.ndarray | None:
    if n_neg is None or n_neg >= n - 1:
        return None
    mask = np.eye(n, dtype=bool)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        mask[i, rng.choice(others, size=n_neg, replace=False)] = True
    return mask


def _views(denoiser, x, cfg, aug, schedule, rng, y=None):
    """Two augmented views of each row, diffused to k and projected to x0."""
    k = cfg.k_timestep
    a = augment(x, aug, rng)
    p = augment(x, aug, rng)
    a_k = forward_diffuse(a, k, rng.standard_normal(a.shape), schedule)
    p_k = forward_diffuse(p, k, rng.standard_normal(p.shape), schedule)
    return predict_x0(denoiser, a_k, k, schedule, y), predict_x0(denoiser, p_k, k, schedule, y)


def contrastive_loss(
    h: DenseNet,
    denoiser: NoisePredictor,
    data: np.ndarray,
    cfg: ContrastiveConfig,
    aug: AugmentConfig,
    schedule: VarianceSchedule,
    seed: int = 0,
) -> float:
    """Mean batch InfoNCE over ``data`` with a fixed augmentation/noise draw."""
    rng = np.random.default_rng(seed)
    losses = []
    for start in range(0, len(data) - 1, cfg.batch_size):
        x = data[start : start + cfg.batch_size]
        if len(x) < 2:
            break
        a, p = _views(denoiser, x, cfg, aug, schedule, rng)
        mask = _negative_mask(len(x), cfg.negatives_per_anchor, rng)
        losses.append(_batch_loss_and_grad(h, a, p, cfg.temperature, mask, False)[0])
    return float(np.mean(losses))


@dataclass
class ExtractorHistory:
    epoch_losses: list[float] = field(default_factory=list)


def train_extractor(
    denoiser: NoisePredictor,
    data: np.ndarray,
    cfg: ContrastiveConfig,
    aug: AugmentConfig,
    schedule: VarianceSchedule,
    rng: np.random.Generator,
    h: DenseNet | None = None,
    hidden: tuple[int, ...] = (64, 64),
    feature_dim: int = 16,
) -> tuple[DenseNet, ExtractorHistory]:
    """Minimize the contrastive loss over ``h`` with Adam; denoiser stays frozen."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("reference dataset is empty")
    if h is None:
        h = DenseNet.init([data.shape[1], *hidden, feature_dim], "relu", "identity", rng)
    state = AdamState.fresh(h.parameter_count, cfg.learning_rate)
    history = ExtractorHistory()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            a, p = _views(denoiser, data[idx], cfg, aug, schedule, rng)
            mask = _negative_mask(len(idx), cfg.negatives_per_anchor, rng)
            loss, grad = _batch_loss_and_grad(h, a, p, cfg.temperature, mask)
            adam_step(h, state, grad)
            losses.append(loss)
        history.epoch_losses.append(float(np.mean(losses)))
    return h, history
