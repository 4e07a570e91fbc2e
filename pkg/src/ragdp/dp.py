"""Retrieval-augmented DP-SGD fine-tuning of the denoiser and RAG inference.

Per iteration: Poisson-sample a batch, diffuse each private example to the
key timestep k, retrieve the nearest public trajectory, train eps_theta on the
later steps v' in 1..v starting from the retrieved latent, clip each
per-example gradient to C, add N(0, (C sigma / B)^2) to the B-normalized sum,
take an Adam step and charge one accountant step.
"""

from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .accountant import PrivacyBudgetExceeded, PrivacyLedger, record_step, to_dp
from .diffusion import Denoiser, VarianceSchedule, forward_diffuse, sample_partial
from .features import extract_features
from .kb import KnowledgeBase, query_batch
from .nn import AdamState, DenseNet, adam_step


class UnclippedGradientError(ValueError):
    pass


@dataclass
class DpConfig:
    clip_norm: float = 1.0
    noise_scale: float = 1.0  # 0 disables noise and accounting (testing only)
    expected_batch: int = 64
    iterations: int = 500
    k_timestep: int = 80
    v_timestep: int = 20
    delta: float = 1e-5
    seed: int = 0
    learning_rate: float = 1e-3
    epsilon_budget: float | None = None
    v_draws: int = 1
    retrieval_topk: int = 1

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.expected_batch < 1 or self.iterations < 0:
            raise ValueError("expected_batch >= 1 and iterations >= 0 required")
        if not 0 < self.v_timestep < self.k_timestep:
            raise ValueError("need 0 < v_timestep < k_timestep")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class IterationRecord:
    batch_size: int
    grad_norm_mean: float
    grad_norm_max: float
    clipped_fraction: float
    loss_mean: float


@dataclass
class TrainingRunRecord:
    iterations: list[IterationRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    checksum_before: str = ""
    checksum_after: str = ""
    ledger: PrivacyLedger | None = None

    def loss_curve(self) -> np.ndarray:
        return np.array([r.loss_mean for r in self.iterations])


def params_checksum(model) -> str:
    return hashlib.sha256(np.asarray(model.get_params(), "<f8").tobytes()).hexdigest()


def poisson_sample(data: np.ndarray, expected_batch: int, rng: np.random.Generator):
    """Include each row independently with probability B / |D|.

    Returns ``(rows, indices)``; the batch may be empty.
    """
    n = len(data)
    if expected_batch > n:
        raise ValueError(f"expected batch {expected_batch} exceeds dataset size {n}")
    idx = np.flatnonzero(rng.random(n) < expected_batch / n)
    return data[idx], idx


def rag_targets(x, x_hat_v, v: int, v_prime, schedule: VarianceSchedule):
    """Target noise and model input for the retrieval-augmented objective.

    n = (x_hat_v - sqrt(abar_v) x) / sqrt(1 - abar_v)
    m = sqrt(abar_v') x + sqrt(1 - abar_v') n
    """
    x = np.asarray(x, dtype=np.float64)
    ab_v = schedule.abar(v)
    ab_p = schedule.abar(v_prime)
    if np.ndim(ab_p) and x.ndim == 2:
        ab_p = ab_p[:, None]
    noise = (np.asarray(x_hat_v) - np.sqrt(ab_v) * x) / np.sqrt(1.0 - ab_v)
    model_in = np.sqrt(ab_p) * x + np.sqrt(1.0 - ab_p) * noise
    return noise, model_in


def rag_diffusion_loss(net, x, x_hat_v, schedule, v: int, rng, y=None, v_prime=None):
    """``||n - eps_theta(m, v')||^2`` with v' ~ U{1..v}. Returns ``(loss, v')``."""
    if not 1 <= v <= schedule.T:
        raise ValueError(f"v={v} outside [1, {schedule.T}]")
    x = np.asarray(x, dtype=np.float64)
    n_rows = x.shape[0] if x.ndim == 2 else None
    if v_prime is None:
        v_prime = rng.integers(1, v + 1, size=n_rows)
    noise, model_in = rag_targets(x, x_hat_v, v, v_prime, schedule)
    pred = net(model_in, v_prime, y)
    loss = np.sum((noise - pred) ** 2, axis=-1)
    return (loss if n_rows is not None else float(loss)), v_prime


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """g / max(1, |g| / C); rows are clipped independently for 2-D input."""
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norm / clip_norm)


def sanitize_batch_gradient(clipped, clip_norm, sigma, expected_batch, rng):
    """Sum of clipped rows / B plus N(0, (C sigma / B)^2 I).

    ``expected_batch`` is the fixed normalizer B, not the realized size.
    """
    clipped = np.atleast_2d(np.asarray(clipped, dtype=np.float64))
    norms = np.linalg.norm(clipped, axis=1)
    if np.any(norms > clip_norm + 1e-9):
        raise UnclippedGradientError(
            f"gradient norm {norms.max():.6g} exceeds clip norm {clip_norm}"
        )
    mean = clipped.sum(axis=0) / expected_batch
    if sigma == 0:
        return mean
    return mean + (clip_norm * sigma / expected_batch) * rng.standard_normal(mean.shape)


def _retrieve(kb, features, topk, rng):
    idx, _ = query_batch(kb, features, topk)
    if topk == 1:
        return idx[:, 0]
    pick = rng.integers(0, idx.shape[1], size=len(idx))
    return idx[np.arange(len(idx)), pick]


def rag_example_gradients(
    denoiser: Denoiser,
    x: np.ndarray,
    kb: KnowledgeBase,
    extractor: DenseNet,
    schedule: VarianceSchedule,
    cfg: DpConfig,
    rng: np.random.Generator,
    y=None,
    projector=None,
):
    """Per-example (losses, gradients) of the RAG objective for a batch.

    ``projector`` is the denoiser used for the key projection (defaults to
    ``denoiser``); it must match the one the KB keys were built with.
    """
    k, v = cfg.k_timestep, cfg.v_timestep
    projector = denoiser if projector is None else projector
    x_k = forward_diffuse(x, k, rng.standard_normal(x.shape), schedule)
    feats = extract_features(extractor, projector, x_k, k, schedule)
    x_hat_v = kb.values[_retrieve(kb, feats, cfg.retrieval_topk, rng)]
    reps = cfg.v_draws
    xr = np.repeat(x, reps, axis=0)
    hr = np.repeat(x_hat_v, reps, axis=0)
    yr = None if y is None else np.repeat(y, reps)
    v_prime = rng.integers(1, v + 1, size=len(xr))
    noise, model_in = rag_targets(xr, hr, v, v_prime, schedule)
    losses, grads = denoiser.loss_and_grads(model_in, v_prime, noise, yr)
    if reps > 1:
        losses = losses.reshape(len(x), reps).mean(axis=1)
        grads = grads.reshape(len(x), reps, -1).mean(axis=1)
    return losses, grads


def dp_finetune(
    denoiser: Denoiser,
    data: np.ndarray,
    kb: KnowledgeBase,
    extractor: DenseNet,
    schedule: VarianceSchedule,
    cfg: DpConfig,
    ledger: PrivacyLedger | None = None,
    labels: np.ndarray | None = None,
    state: AdamState | None = None,
    projector=None,
) -> tuple[Denoiser, TrainingRunRecord]:
    """Fine-tune only eps_theta; extractor and KB are frozen.

    Retrieval keys are projected with ``projector``, by default a frozen
    copy of the denoiser as it was on entry (the model the KB was built with).
    """
    if (kb.k_timestep, kb.v_timestep) != (cfg.k_timestep, cfg.v_timestep):
        raise ValueError("KB timesteps do not match the DP config")
    if cfg.noise_scale > 0 and ledger is None:
        ledger = PrivacyLedger()
    if ledger is not None:
        ledger.sampling_rate = cfg.expected_batch / len(data)
    if cfg.delta >= 1.0 / len(data):
        warnings.warn("delta is not smaller than 1/|D_prv|", stacklevel=2)
    rng = np.random.default_rng(cfg.seed)
    projector = denoiser.copy() if projector is None else projector
    state = state or AdamState.fresh(denoiser.parameter_count, cfg.learning_rate)
    record = TrainingRunRecord(checksum_before=params_checksum(denoiser), ledger=ledger)
    start = time.perf_counter()
    for _ in range(cfg.iterations):
        if cfg.epsilon_budget is not None and ledger is not None and ledger.steps:
            if to_dp(ledger, cfg.delta)[0] > cfg.epsilon_budget:
                raise PrivacyBudgetExceeded(
                    f"ledger already exceeds epsilon budget {cfg.epsilon_budget}"
                )
        batch, idx = poisson_sample(data, cfg.expected_batch, rng)
        y = None if labels is None else labels[idx]
        if len(batch):
            losses, grads = rag_example_gradients(
                denoiser, batch, kb, extractor, schedule, cfg, rng, y, projector
            )
            norms = np.linalg.norm(grads, axis=1)
            clipped = clip_gradient(grads, cfg.clip_norm)
            noisy = sanitize_batch_gradient(
                clipped, cfg.clip_norm, cfg.noise_scale, cfg.expected_batch, rng
            )
            adam_step(denoiser, state, noisy)
            record.iterations.append(
                IterationRecord(
                    len(batch), float(norms.mean()), float(norms.max()),
                    float(np.mean(norms > cfg.clip_norm)), float(losses.mean()),
                )
            )
        else:
            record.iterations.append(IterationRecord(0, 0.0, 0.0, 0.0, float("nan")))
        if cfg.noise_scale > 0:
            record_step(ledger, cfg.noise_scale)
    record.wall_clock = time.perf_counter() - start
    record.checksum_after = params_checksum(denoiser)
    return denoiser, record


def rag_inference(
    denoiser: Denoiser,
    kb: KnowledgeBase,
    extractor: DenseNet,
    schedule: VarianceSchedule,
    n_samples: int,
    k: int,
    v: int,
    steps_early: int,
    steps_late: int,
    rng: np.random.Generator,
    y=None,
    topk: int = 1,
    projector=None,
) -> tuple[np.ndarray, int]:
    """Sample T->k, retrieve x_hat_v by the key of x_k, resume v->0.

    Returns ``(samples, denoiser calls per sample)``, counting the key
    projection whether it runs on ``denoiser`` or a separate ``projector``.
    """
    if (kb.k_timestep, kb.v_timestep) != (k, v):
        raise ValueError("KB timesteps do not match (k, v)")
    if n_samples == 0:
        return np.zeros((0, kb.d_data)), 0
    projector = denoiser if projector is None else projector
    before = denoiser.calls + (projector.calls if projector is not denoiser else 0)
    x_T = rng.standard_normal((n_samples, kb.d_data))
    x_k = sample_partial(denoiser, x_T, schedule.T, k, steps_early, schedule, y).final
    # Keys were built label-free, so queries are too.
    feats = extract_features(extractor, projector, x_k, k, schedule)
    x_hat_v = kb.values[_retrieve(kb, feats, topk, rng)]
    out = sample_partial(denoiser, x_hat_v, v, 0, steps_late, schedule, y).final
    after = denoiser.calls + (projector.calls if projector is not denoiser else 0)
    return out, (after - before) // n_samples
