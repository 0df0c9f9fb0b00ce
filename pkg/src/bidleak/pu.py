"""Positive-unlabeled prior and posterior estimation from classifier
predictions.

The winner prediction density is modeled as a two-component mixture: a
corrupted component of weight alpha plus a fair component approximated by the
runner-up density shifted by a placebo-estimated gap. Densities are Gaussian
KDEs with boundary reflection on [0, 1]; the prior is the fixed point of the
clipped-posterior iteration

    posterior(y) = clip(1 - (1 - alpha) * fair(y) / winner(y), 0, 1)
    alpha        = mean posterior over the winners' predictions

starting from alpha = 0, which converges monotonically to the smallest
fixed point (the identifiable prior).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError

DEFAULT_GRID_SIZE = 1000
EM_TOL = 1e-4
EM_MAX_ITER = 10_000
DENSITY_FLOOR = 1e-6
SUPPORT_FLOOR = 0.05
RATIO_CAP_QUANTILE = 0.75
_MIN_POINTS = 100
_MIN_FAIR_MASS = 1e-3


_np_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def trapezoid(values: np.ndarray, grid: np.ndarray) -> float:
    return float(_np_trapezoid(values, grid))


@dataclass
class DensityGrid:
    """A probability density sampled on an even grid over [0, 1]."""

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return trapezoid(self.values, self.grid)

    def at(self, y) -> np.ndarray:
        return np.interp(y, self.grid, self.values)


@dataclass
class DeltaCorrection:
    """Signed placebo gap between winner and runner-up prediction densities."""

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return trapezoid(self.values, self.grid)


@dataclass
class MixtureEstimate:
    """Corruption prior plus the posterior curve over the prediction grid."""

    alpha: float
    grid: np.ndarray
    posterior: np.ndarray
    corrected_fair_density: DensityGrid
    iterations: int
    converged: bool
    bandwidths: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "grid": self.grid.tolist(),
            "posterior": self.posterior.tolist(),
            "bandwidths": self.bandwidths,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def silverman_bandwidth(points: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    x = np.asarray(points, dtype=np.float64)
    std = float(np.std(x))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    return 0.9 * spread * len(x) ** (-0.2)


def estimate_density(
    predictions,
    grid_size: int = DEFAULT_GRID_SIZE,
    bandwidth: float | None = None,
    weights=None,
) -> DensityGrid:
    """Gaussian KDE with reflection at both boundaries, renormalized so the
    trapezoidal integral over [0, 1] is 1.

    ``weights`` (non-negative, not all zero) reweight the sample points;
    the default is the plain unweighted estimate.
    """
    x = np.asarray(predictions, dtype=np.float64)
    if x.size < _MIN_POINTS:
        raise DataError(
            f"density estimation needs at least {_MIN_POINTS} points, got {x.size}"
        )
    if x.min() <= 0.0 or x.max() >= 1.0:
        raise DataError("predictions must lie strictly inside (0, 1)")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
    if not bandwidth > 0.0:
        raise DataError(f"bandwidth must be positive, got {bandwidth}")
    if weights is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape or (w < 0).any() or w.sum() <= 0:
            raise DataError("weights must be non-negative, same length, not all 0")

    grid = np.linspace(0.0, 1.0, grid_size)
    values = np.zeros(grid_size, dtype=np.float64)
    norm = 1.0 / (w.sum() * bandwidth * math.sqrt(2.0 * math.pi))
    # Reflect the sample across both boundaries so mass near 0 and 1 is kept.
    chunk = max(1, 2_000_000 // grid_size)
    for start in range(0, x.size, chunk):
        xs = x[start:start + chunk]
        ws = w[start:start + chunk]
        for centers in (xs, -xs, 2.0 - xs):
            z = (grid[None, :] - centers[:, None]) / bandwidth
            values += (ws[:, None] * np.exp(-0.5 * z * z)).sum(axis=0)
    values *= norm
    values /= trapezoid(values, grid)
    return DensityGrid(grid=grid, values=values, bandwidth=bandwidth)


def estimate_delta(
    placebo_winner_preds,
    placebo_runnerup_preds,
    grid_size: int = DEFAULT_GRID_SIZE,
    bandwidth: float | None = None,
) -> DeltaCorrection:
    """Placebo winner density minus placebo runner-up density on a shared
    grid. Both KDEs use one bandwidth (the smaller of the two Silverman
    choices unless overridden) so the difference has no bandwidth artifacts.
    """
    w = np.asarray(placebo_winner_preds, dtype=np.float64)
    r = np.asarray(placebo_runnerup_preds, dtype=np.float64)
    if bandwidth is None:
        bandwidth = min(silverman_bandwidth(w), silverman_bandwidth(r))
    dw = estimate_density(w, grid_size, bandwidth)
    dr = estimate_density(r, grid_size, bandwidth)
    return DeltaCorrection(
        grid=dw.grid, values=dw.values - dr.values, bandwidth=bandwidth
    )


def zero_delta(grid_size: int = DEFAULT_GRID_SIZE) -> DeltaCorrection:
    """The no-correction mode: a placebo gap that is identically zero."""
    grid = np.linspace(0.0, 1.0, grid_size)
    return DeltaCorrection(grid=grid, values=np.zeros(grid_size), bandwidth=math.nan)


def _check_aligned(grid_a: np.ndarray, grid_b: np.ndarray, what: str) -> None:
    if grid_a.shape != grid_b.shape or not np.allclose(grid_a, grid_b):
        raise DataError(f"{what} grid is not aligned with the winner grid")


def em_estimate(
    f_w: DensityGrid,
    f_wbar: DensityGrid,
    delta: DeltaCorrection | None,
    winner_preds,
    *,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    density_floor: float = DENSITY_FLOOR,
    support_floor: float = SUPPORT_FLOOR,
    ratio_cap_quantile: float = RATIO_CAP_QUANTILE,
) -> MixtureEstimate:
    """Fixed-point estimation of the corruption prior and posterior curve.

    The corrected fair density is max(runnerup + delta, 0) renormalized;
    passing ``delta=None`` (or an all-zero correction) gives the uncorrected
    estimate for comparison runs.

    Two safeguards make the ratio field usable on estimated densities and
    leave exact ones untouched. Where the winner density falls below
    ``support_floor`` (relative to the uniform density on [0, 1]) there is
    too little data for a ratio, so it is pinned to 1 and the posterior
    falls back to the prior. And under the mixture model the ratio is the
    constant 1/(1 - alpha) on the whole corruption-free region, so its level
    is read off robustly: the field is capped at the ``ratio_cap_quantile``
    quantile of its values at the winner predictions, which stops thin
    contaminated or noisy regions from dragging the fixed point upward.
    """
    winners = np.asarray(winner_preds, dtype=np.float64)
    if winners.size == 0:
        raise DataError("no winner predictions supplied")
    _check_aligned(f_w.grid, f_wbar.grid, "runner-up")
    if delta is None:
        delta = zero_delta(len(f_w.grid))
    _check_aligned(f_w.grid, delta.grid, "delta")

    grid = f_w.grid
    fair_raw = np.maximum(f_wbar.values + delta.values, 0.0)
    mass = trapezoid(fair_raw, grid)
    if mass < _MIN_FAIR_MASS:
        raise DataError(
            "delta dominates baseline: corrected fair density has no mass"
        )
    fair = fair_raw / mass
    ratio = fair / np.maximum(f_w.values, density_floor)
    ratio[f_w.values < support_floor] = 1.0
    ratio_at_winners = np.interp(winners, grid, ratio)

    cap = float(np.quantile(ratio_at_winners, ratio_cap_quantile))
    if cap > 0.0:
        ratio = np.minimum(ratio, cap)
        ratio_at_winners = np.minimum(ratio_at_winners, cap)

    # Renormalize the ratio on the winner sample. Its mean is 1 for exact
    # densities but carries sampling noise for estimated ones, and the
    # fixed-point map inherits that noise as a drift term whose sign decides
    # between the true prior and a spurious all-corrupt attractor at 1.
    # Dividing it out leaves exact inputs untouched and makes the map
    # monotone non-decreasing in alpha with no drift.
    mean_ratio = float(ratio_at_winners.mean())
    if mean_ratio <= 0.0:
        raise DataError(
            "delta dominates baseline: fair density vanishes on the winners"
        )
    ratio = ratio / mean_ratio
    ratio_at_winners = ratio_at_winners / mean_ratio

    # Starting at 0, the iteration climbs to the smallest fixed point (the
    # identifiable prior).
    alpha = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        posterior_at = np.clip(1.0 - (1.0 - alpha) * ratio_at_winners, 0.0, 1.0)
        new_alpha = float(posterior_at.mean())
        done = abs(new_alpha - alpha) < tol
        alpha = new_alpha
        if done:
            converged = True
            break

    posterior = np.clip(1.0 - (1.0 - alpha) * ratio, 0.0, 1.0)
    corrected = DensityGrid(grid=grid, values=fair, bandwidth=f_wbar.bandwidth)
    bandwidths = {
        "winner": f_w.bandwidth,
        "runner_up": f_wbar.bandwidth,
        "delta": delta.bandwidth,
    }
    return MixtureEstimate(
        alpha=alpha,
        grid=grid,
        posterior=posterior,
        corrected_fair_density=corrected,
        iterations=iterations,
        converged=converged,
        bandwidths=bandwidths,
    )


def posterior_for_auction(est: MixtureEstimate, y: float) -> float:
    """Linear interpolation of the posterior curve at ``y``; values outside
    the grid clamp to the nearest endpoint."""
    if not est.converged:
        raise ConvergenceError(
            "mixture estimate did not converge; posterior lookup refused"
        )
    return float(np.clip(np.interp(y, est.grid, est.posterior), 0.0, 1.0))
