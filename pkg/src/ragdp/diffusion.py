"""Variance schedules, closed-form noising, the noise-prediction objective and
a deterministic (eta = 0) DDIM sampler with partial trajectories."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import AdamState, DenseNet, DimensionError, adam_step, timestep_embedding


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step tables for t = 1..T, stored at index t - 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def abar(self, t):
        """alpha_bar at timestep(s) ``t`` with alpha_bar(0) = 1."""
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[np.asarray(t)]

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.asarray(self.beta, "<f8").tobytes())
        return h.digest()


def make_schedule(
    T: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> VarianceSchedule:
    if T < 2:
        raise ValueError("need T >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        # Cosine alpha_bar curve; betas clipped into [beta_start, beta_end].
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return VarianceSchedule(T, beta, alpha, np.cumprod(alpha), kind)


def _check_t(t, schedule: VarianceSchedule, low: int = 1) -> None:
    ta = np.asarray(t)
    if np.any(ta < low) or np.any(ta > schedule.T):
        raise ValueError(f"timestep {t} outside [{low}, {schedule.T}]")


def forward_diffuse(x0, t, eps, schedule: VarianceSchedule) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` may be one per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    _check_t(t, schedule)
    ab = schedule.abar(t)
    if np.ndim(ab) and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class NoisePredictor:
    """Anything usable as eps_theta. Counts per-example evaluations in ``calls``."""

    calls: int = 0

    def __call__(self, x, t, y=None):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        self.calls += x2.shape[0]
        out = self.predict(x2, t, y)
        return out[0] if single else out

    def predict(self, x: np.ndarray, t, y=None) -> np.ndarray:
        raise NotImplementedError


class Denoiser(NoisePredictor):
    """eps_theta(x_t, t[, y]) as a dense net over [x, emb(t), class_emb(y)].

    Conditional models keep one extra class-embedding row, index
    ``n_classes``, used when no label is given.
    """

    def __init__(
        self,
        net: DenseNet,
        data_dim: int,
        T: int,
        temb_dim: int = 16,
        n_classes: int = 0,
        class_dim: int = 4,
        class_emb: np.ndarray | None = None,
    ):
        self.data_dim = data_dim
        self.T = T
        self.temb_dim = temb_dim
        self.n_classes = n_classes
        self.class_dim = class_dim if n_classes else 0
        expected = data_dim + temb_dim + self.class_dim
        if net.input_dim != expected or net.output_dim != data_dim:
            raise DimensionError(
                f"denoiser net must map {expected} -> {data_dim}, "
                f"got {net.input_dim} -> {net.output_dim}"
            )
        self.net = net
        if n_classes:
            if class_emb is None:
                class_emb = np.zeros((n_classes + 1, class_dim))
            self.class_emb = np.asarray(class_emb, dtype=np.float64)
        else:
            self.class_emb = np.zeros((0, 0))
        self._temb = timestep_embedding(np.arange(T + 1), temb_dim, T)
        self.calls = 0

    @classmethod
    def build(
        cls,
        data_dim: int,
        T: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        temb_dim: int = 16,
        n_classes: int = 0,
        class_dim: int = 4,
        rng: np.random.Generator | None = None,
    ) -> "Denoiser":
        rng = np.random.default_rng(0) if rng is None else rng
        cdim = class_dim if n_classes else 0
        net = DenseNet.init(
            [data_dim + temb_dim + cdim, *hidden, data_dim], activation, "identity", rng
        )
        emb = rng.normal(0.0, 0.1, (n_classes + 1, class_dim)) if n_classes else None
        return cls(net, data_dim, T, temb_dim, n_classes, class_dim, emb)

    @property
    def parameter_count(self) -> int:
        return self.net.parameter_count + self.class_emb.size

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.net.get_params(), self.class_emb.ravel()])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.parameter_count,):
            raise DimensionError(
                f"expected {self.parameter_count} parameters, got {flat.shape}"
            )
        n = self.net.parameter_count
        self.net.set_params(flat[:n])
        self.class_emb = flat[n:].reshape(self.class_emb.shape).copy()

    def copy(self) -> "Denoiser":
        return Denoiser(
            self.net.copy(),
            self.data_dim,
            self.T,
            self.temb_dim,
            self.n_classes,
            self.class_dim,
            self.class_emb.copy() if self.n_classes else None,
        )

    def _class_index(self, y, n: int) -> np.ndarray:
        if y is None:
            return np.full(n, self.n_classes)
        idx = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy()
        idx[idx < 0] = self.n_classes
        return idx

    def _inputs(self, x: np.ndarray, t, y) -> tuple[np.ndarray, np.ndarray | None]:
        n = x.shape[0]
        if x.shape[1] != self.data_dim:
            raise DimensionError(
                f"denoiser expects data dim {self.data_dim}, got {x.shape[1]}"
            )
        temb = self._temb[np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))]
        if not self.n_classes:
            return np.concatenate([x, temb], axis=1), None
        cls_idx = self._class_index(y, n)
        return np.concatenate([x, temb, self.class_emb[cls_idx]], axis=1), cls_idx

    def predict(self, x, t, y=None):
        inp, _ = self._inputs(x, t, y)
        return self.net.forward(inp)

    def loss_and_grads(self, x, t, target, y=None, per_example: bool = True):
        """Squared-error loss ``||target - eps_theta(x, t)||^2`` per row.

        Returns ``(losses, grads)``; grads are ``(n, P)`` per example or the
        batch sum ``(P,)``. Counts as one evaluation per row.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.calls += x.shape[0]
        inp, cls_idx = self._inputs(x, t, y)
        out, cache = self.net.forward_cached(inp)
        diff = out - np.atleast_2d(target)
        losses = np.sum(diff * diff, axis=1)
        g_net, g_in = self.net.backward(cache, 2.0 * diff, per_example)
        if not self.n_classes:
            return losses, g_net
        g_cls_rows = g_in[:, -self.class_dim :]
        if per_example:
            g_cls = np.zeros((x.shape[0], *self.class_emb.shape))
            g_cls[np.arange(x.shape[0]), cls_idx] = g_cls_rows
            return losses, np.concatenate([g_net, g_cls.reshape(x.shape[0], -1)], 1)
        g_cls = np.zeros_like(self.class_emb)
        np.add.at(g_cls, cls_idx, g_cls_rows)
        return losses, np.concatenate([g_net, g_cls.ravel()])


def ddpm_loss(
    net: NoisePredictor,
    x0,
    schedule: VarianceSchedule,
    rng: np.random.Generator,
    y=None,
    t=None,
    eps=None,
):
    """Noise-prediction loss with t ~ U{1..T}, eps ~ N(0, I).

    Returns ``(loss, t, eps)``; for a batch ``x0`` the loss is per row.
    Passing ``t``/``eps`` replays a previous draw.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.ndim == 2
    n = x0.shape[0] if batch else None
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, t, eps, schedule)
    pred = net(x_t, t, y)
    loss = np.sum((eps - pred) ** 2, axis=-1)
    return (loss if batch else float(loss)), t, eps


def predict_x0(net: NoisePredictor, x_t, t: int, schedule: VarianceSchedule, y=None):
    """One-step projection (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    eps_hat = net(x_t, t, y)
    ab = schedule.abar(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(net: NoisePredictor, x_t, t: int, t_next: int, schedule, y=None):
    if t_next >= t:
        raise ValueError(f"t_next ({t_next}) must be < t ({t})")
    _check_t(t, schedule)
    if t_next < 0:
        raise ValueError("t_next must be >= 0")
    eps_hat = net(x_t, t, y)
    ab, ab_next = schedule.abar(t), schedule.abar(t_next)
    x0_pred = (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.sqrt(ab_next) * x0_pred + np.sqrt(1.0 - ab_next) * eps_hat


def timestep_grid(t_start: int, t_end: int, n_steps: int) -> list[int]:
    """``n_steps + 1`` strictly decreasing integers from t_start to t_end."""
    if t_start <= t_end or t_end < 0:
        raise ValueError(f"need t_start > t_end >= 0, got {t_start}, {t_end}")
    span = t_start - t_end
    if not 1 <= n_steps <= span:
        raise ValueError(f"n_steps must be in [1, {span}], got {n_steps}")
    return [t_start - (i * span) // n_steps for i in range(n_steps + 1)]


@dataclass
class Trajectory:
    timesteps: list[int]
    latents: list[np.ndarray]
    direction: str = "reverse"
    denoiser_calls: int = 0  # per trajectory

    def __post_init__(self):
        ts = np.asarray(self.timesteps)
        d = np.diff(ts)
        ok = np.all(d < 0) if self.direction == "reverse" else np.all(d > 0)
        if not ok:
            raise ValueError(f"timesteps not monotone for {self.direction} trajectory")

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]


def sample_partial(
    net: NoisePredictor,
    x_start,
    t_start: int,
    t_end: int,
    n_steps: int,
    schedule: VarianceSchedule,
    y=None,
) -> Trajectory:
    """Run DDIM from ``t_start`` down to ``t_end`` in ``n_steps`` calls.

    ``x_start`` may be a batch; ``denoiser_calls`` is then per row.
    """
    grid = timestep_grid(t_start, t_end, n_steps)
    x = np.asarray(x_start, dtype=np.float64)
    rows = x.shape[0] if x.ndim == 2 else 1
    before = getattr(net, "calls", 0)
    latents = [x]
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = ddim_step(net, x, t, t_next, schedule, y)
        latents.append(x)
    calls = (getattr(net, "calls", 0) - before) // rows
    return Trajectory(grid, latents, "reverse", calls)


def sample_full(net, n, schedule, rng, n_steps=None, y=None, dim=None) -> np.ndarray:
    """Plain DDIM generation from x_T ~ N(0, I) down to 0."""
    dim = dim if dim is not None else net.data_dim
    x_T = rng.standard_normal((n, dim))
    if n == 0:
        return x_T
    steps = schedule.T if n_steps is None else n_steps
    return sample_partial(net, x_T, schedule.T, 0, steps, schedule, y).final


def pretrain_denoiser(
    denoiser: Denoiser,
    data: np.ndarray,
    schedule: VarianceSchedule,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    learning_rate: float = 2e-3,
    labels: np.ndarray | None = None,
    label_dropout: float = 0.1,
    state: AdamState | None = None,
) -> tuple[Denoiser, AdamState, list[float]]:
    """Non-private Adam on the noise-prediction objective.

    Labels (conditional models only) are replaced by the null class with
    probability ``label_dropout`` so unconditional queries stay meaningful.
    """
    state = state or AdamState.fresh(denoiser.parameter_count, learning_rate)
    history = []
    n = len(data)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        x0 = data[idx]
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(x0.shape)
        y = None
        if denoiser.n_classes and labels is not None:
            y = labels[idx].copy()
            y[rng.random(len(idx)) < label_dropout] = -1
        x_t = forward_diffuse(x0, t, eps, schedule)
        losses, grad = denoiser.loss_and_grads(x_t, t, eps, y, per_example=False)
        adam_step(denoiser, state, grad / len(idx))
        history.append(float(losses.mean()))
    return denoiser, state, history


def mean_ddpm_loss(denoiser, data, schedule, seed: int = 0, repeats: int = 4) -> float:
    """Fixed-draw Monte-Carlo estimate of the objective, for before/after checks."""
    rng = np.random.default_rng(seed)
    vals = [ddpm_loss(denoiser, data, schedule, rng)[0].mean() for _ in range(repeats)]
    return float(np.mean(vals))
