"""RDP bookkeeping for the clipped, noised batch gradient.

Each release of the sanitized gradient (sensitivity 2C/B, noise std C*sigma/B)
is (alpha, 2*alpha/sigma**2)-RDP. Steps compose additively at fixed alpha and
convert to (eps, delta)-DP via eps_rdp + log(1/delta)/(alpha - 1).

No subsampling amplification is credited; the sampling rate is recorded so an
amplification-aware accountant can replace this one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ALPHAS = (
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0,
    32.0, 64.0, 128.0, 256.0,
)


class PrivacyBudgetExceeded(RuntimeError):
    pass


def rdp_per_step(sigma: float, alpha: float) -> float:
    if alpha <= 1:
        raise ValueError(f"RDP order must exceed 1, got {alpha}")
    if sigma <= 0:
        raise ValueError(f"noise scale must be positive, got {sigma}")
    return 2.0 * alpha / sigma**2


def gaussian_mechanism_rdp(alpha: float, sensitivity: float, noise_std: float) -> float:
    """alpha * Delta**2 / (2 s**2) for a Gaussian mechanism with L2 sensitivity Delta."""
    return alpha * sensitivity**2 / (2.0 * noise_std**2)


@dataclass
class PrivacyLedger:
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    accumulated_rdp: np.ndarray | None = None
    steps: int = 0
    sigma: float | None = None
    sampling_rate: float | None = None
    sigma_history: list[list] = field(default_factory=list)  # [[sigma, count], ...]

    def __post_init__(self):
        grid = tuple(float(a) for a in self.alpha_grid)
        if any(a <= 1 for a in grid) or list(grid) != sorted(grid):
            raise ValueError("alpha grid must be sorted and > 1")
        self.alpha_grid = grid
        if self.accumulated_rdp is None:
            self.accumulated_rdp = np.zeros(len(grid))
        self.accumulated_rdp = np.asarray(self.accumulated_rdp, dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha_grid": list(self.alpha_grid),
                "accumulated_rdp": self.accumulated_rdp.tolist(),
                "steps": self.steps,
                "sigma": self.sigma,
                "sampling_rate": self.sampling_rate,
                "sigma_history": self.sigma_history,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "PrivacyLedger":
        d = json.loads(text)
        return cls(
            tuple(d["alpha_grid"]), np.array(d["accumulated_rdp"]), d["steps"],
            d["sigma"], d.get("sampling_rate"), d.get("sigma_history", []),
        )

    def summary(self, delta: float) -> dict:
        """Structured record with the full (alpha, eps) curve and final guarantee."""
        out = json.loads(self.to_json())
        if self.steps:
            eps, alpha, curve = to_dp(self, delta, with_curve=True)
            out.update(epsilon=eps, delta=delta, best_alpha=alpha, curve=curve.tolist())
        return out


def record_step(ledger: PrivacyLedger, sigma: float) -> PrivacyLedger:
    ledger.accumulated_rdp = ledger.accumulated_rdp + np.array(
        [rdp_per_step(sigma, a) for a in ledger.alpha_grid]
    )
    ledger.steps += 1
    ledger.sigma = sigma
    if ledger.sigma_history and ledger.sigma_history[-1][0] == sigma:
        ledger.sigma_history[-1][1] += 1
    else:
        ledger.sigma_history.append([sigma, 1])
    return ledger


def to_dp(ledger: PrivacyLedger, delta: float, with_curve: bool = False):
    """Returns ``(eps, best_alpha)`` (plus the per-alpha eps curve if asked)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if ledger.steps == 0:
        raise ValueError("ledger has no recorded steps")
    alphas = np.array(ledger.alpha_grid)
    curve = ledger.accumulated_rdp + math.log(1.0 / delta) / (alphas - 1.0)
    i = int(np.argmin(curve))
    if with_curve:
        return float(curve[i]), float(alphas[i]), curve
    return float(curve[i]), float(alphas[i])


def epsilon_for(sigma: float, steps: int, delta: float, alpha_grid=DEFAULT_ALPHAS) -> float:
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    return float(np.min(steps * 2.0 * alphas / sigma**2 + math.log(1 / delta) / (alphas - 1)))


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    steps: int,
    alpha_grid=DEFAULT_ALPHAS,
    rtol: float = 1e-6,
    sigma_max: float = 1e6,
) -> float:
    """Smallest sigma (to ``rtol``) whose ``steps``-fold composition meets the target."""
    if target_epsilon <= 0 or steps < 1:
        raise ValueError("need target_epsilon > 0 and steps >= 1")
    lo, hi = 0.5, 1.0
    while epsilon_for(lo, steps, delta, alpha_grid) <= target_epsilon:
        lo, hi = lo / 2.0, lo
    while epsilon_for(hi, steps, delta, alpha_grid) > target_epsilon:
        lo, hi = hi, hi * 2.0
        if hi > sigma_max:
            raise ValueError(f"target epsilon {target_epsilon} needs sigma > {sigma_max}")
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if epsilon_for(mid, steps, delta, alpha_grid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    # Verify with a real accounting pass.
    ledger = PrivacyLedger(tuple(alpha_grid))
    for _ in range(steps):
        record_step(ledger, hi)
    if to_dp(ledger, delta)[0] > target_epsilon * (1 + 1e-9):
        raise RuntimeError("calibrated sigma fails the accounting check")
    return hi
