"""Desk-scale quality, diversity and cost metrics.

The Frechet distance is computed between Gaussian fits in data space (no
perceptual embedding). Coverage follows the k-NN-ball construction: a real
point counts as covered when some synthetic point lies in the closed ball
whose radius is the distance to its ``nn_size``-th nearest real neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PSD_TOL = 1e-8


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int

    def __post_init__(self):
        cov = np.asarray(self.covariance)
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")


def fit_gaussian(samples) -> GaussianFit:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    if n < 2 or n < d + 1:
        raise ValueError(f"need at least dim + 1 = {d + 1} samples, got {n}")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (n - 1)
    return GaussianFit(mean, 0.5 * (cov + cov.T), n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -_PSD_TOL:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance_squared(a: GaussianFit, b: GaussianFit) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of (S_a S_b)^{1/2} equals that of (S_a^{1/2} S_b S_a^{1/2})^{1/2},
    a symmetric PSD matrix, so everything goes through ``eigh``.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("Gaussian fits differ in dimension")
    ra = _psd_sqrt(a.covariance)
    _psd_sqrt(b.covariance)  # PSD check only
    inner = ra @ b.covariance @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if w.min() < -_PSD_TOL:
        raise ValueError("covariance product is not PSD")
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = a.mean - b.mean
    d2 = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * tr_sqrt
    return float(max(d2, 0.0))


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Square root of :func:`frechet_distance_squared`."""
    return float(np.sqrt(frechet_distance_squared(a, b)))


def sample_frechet(x, y) -> float:
    return frechet_distance(fit_gaussian(x), fit_gaussian(y))


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def knn_radii(real: np.ndarray, nn_size: int, chunk: int = 2048) -> np.ndarray:
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    n = len(real)
    if not 1 <= nn_size < n:
        raise ValueError(f"nn_size must be in [1, {n - 1}]")
    radii = np.empty(n)
    for s in range(0, n, chunk):
        d = np.sqrt(_pairwise_sq(real[s : s + chunk], real))
        d[np.arange(len(d)), np.arange(s, s + len(d))] = np.inf
        radii[s : s + chunk] = np.partition(d, nn_size - 1, axis=1)[:, nn_size - 1]
    return radii


def coverage(real, synthetic, nn_size: int = 5, chunk: int = 2048) -> float:
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synthetic = np.asarray(synthetic, dtype=np.float64)
    radii = knn_radii(real, nn_size, chunk)
    if synthetic.size == 0:
        return 0.0
    synthetic = synthetic.reshape(-1, real.shape[1])
    nearest = np.empty(len(real))
    for s in range(0, len(real), chunk):
        nearest[s : s + chunk] = np.sqrt(
            _pairwise_sq(real[s : s + chunk], synthetic).min(axis=1)
        )
    return float(np.mean(nearest <= radii))


def efficiency_report(records: list[dict]) -> list[dict]:
    """One row per run record with per-sample denoiser calls and timings.

    Records carry ``mode``, ``n_samples``, ``denoiser_calls`` (per sample) and
    optionally ``wall_clock`` and ``kb_build_time`` in seconds.
    """
    rows = []
    for r in records:
        full = r.get("full_steps")
        calls = r["denoiser_calls"]
        rows.append(
            {
                "mode": r["mode"],
                "n_samples": r.get("n_samples", 0),
                "calls_per_sample": calls,
                "reduction_vs_full": None if not full else 1.0 - calls / full,
                "wall_clock": r.get("wall_clock"),
                "kb_build_time": r.get("kb_build_time"),
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[("" if r[c] is None else f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c])) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in cells])
