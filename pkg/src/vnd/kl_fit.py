"""Refit the closed-form weight-KL curve against its Monte Carlo truth.

Builds a grid of Monte Carlo estimates of the per-weight negative KL
over log alpha in [-5, 0.5], then least-squares fits

    a1 * exp(-e^{a4} (a2 + a3 x)^2) - 0.5 * log(1 + e^{-x}) + c

to it.  Acceptance is on curve error, not on recovering particular
constants: the bump has one redundant direction (rescaling a2, a3
against a4), so the constants themselves are only weakly identified.
The intercept ``c`` is a fitted nuisance and is excluded from any
training use, where additive KL constants cannot matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import least_squares

from .layers import DEFAULT_KL_CONSTANTS, KlApproxConstants, neg_kl_weight_mc

GRID_LO = -5.0
GRID_HI = 0.5


class FitConvergenceError(RuntimeError):
    """The fitted curve missed the Monte Carlo truth by more than 0.05 nats."""


@dataclass
class FitReport:
    """Grid, fitted curve, and how far the fit sits from the shipped defaults."""

    log_alpha: np.ndarray
    mc_values: np.ndarray
    fitted_values: np.ndarray
    max_abs_deviation: float
    constants: KlApproxConstants
    default_deltas: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.log_alpha[0] > GRID_LO + 1e-9 or self.log_alpha[-1] < GRID_HI - 1e-9:
            raise ValueError("grid must cover the full fit range")
        if self.max_abs_deviation < 0:
            raise ValueError("deviations are nonnegative by construction")

    def rows(self):
        dev = np.abs(self.fitted_values - self.mc_values)
        return zip(self.log_alpha, self.mc_values, self.fitted_values, dev)


def eval_approx(constants: KlApproxConstants, log_alpha) -> np.ndarray:
    """The fitted curve at arbitrary constants (intercept included)."""
    x = np.asarray(log_alpha, dtype=np.float64)
    bump = constants.a1 * np.exp(
        -np.exp(constants.a4) * (constants.a2 + constants.a3 * x) ** 2
    )
    return bump - 0.5 * np.logaddexp(0.0, -x) + constants.offset


def mc_truth_grid(
    grid_size: int = 64, n_samples: int = 10**6, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo negative-KL values on an even grid over [-5, 0.5].

    Each grid point draws from its own generator stream, so points are
    independent and the grid is reproducible per (seed, grid_size).
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    if n_samples < 10**5:
        raise ValueError("n_samples must be at least 1e5")
    xs = np.linspace(GRID_LO, GRID_HI, grid_size)
    vals = np.empty_like(xs)
    for i, x in enumerate(xs):
        gen = torch.Generator().manual_seed(seed * 1_000_003 + i)
        vals[i] = neg_kl_weight_mc(float(x), n_samples, gen)
    return xs, vals


def _fit_once(xs: np.ndarray, ys: np.ndarray, x0: np.ndarray, max_nfev: int):
    def residual(p):
        c = KlApproxConstants(p[0], p[1], p[2], p[3], p[4])
        return eval_approx(c, xs) - ys

    lo = [1e-6, -np.inf, 1e-6, -np.inf, -np.inf]
    hi = [np.inf] * 5
    return least_squares(
        residual, x0, bounds=(lo, hi), method="trf", max_nfev=max_nfev
    )


def fit_constants(
    xs: np.ndarray,
    ys: np.ndarray,
    *,
    restarts: int = 4,
    seed: int = 0,
    max_nfev: int = 100_000,
) -> tuple[KlApproxConstants, FitReport]:
    """Least-squares fit of the curve to a truth grid.

    One start at the shipped defaults plus ``restarts`` random starts;
    the solution with the lowest squared error wins, with near-ties
    (within a relative 1e-6) resolved in favor of the earlier start so
    the default-seeded solution is preferred on the flat directions.
    Raises ``FitConvergenceError`` if the best fit still deviates from
    the truth by more than 0.05 nats anywhere on the grid.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    d = DEFAULT_KL_CONSTANTS
    starts = [np.array([d.a1, d.a2, d.a3, d.a4, 0.0])]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(
            np.array(
                [
                    rng.uniform(0.2, 1.5),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(0.05, 1.0),
                    rng.uniform(-1.0, 1.5),
                    rng.uniform(-0.2, 0.2),
                ]
            )
        )
    best = None
    best_cost = np.inf
    for x0 in starts:
        res = _fit_once(xs, ys, x0, max_nfev)
        if res.cost < best_cost * (1.0 - 1e-6):
            best, best_cost = res, res.cost
    assert best is not None
    p = best.x
    constants = KlApproxConstants(p[0], p[1], p[2], p[3], p[4])
    fitted = eval_approx(constants, xs)
    max_dev = float(np.max(np.abs(fitted - ys)))
    if max_dev > 0.05:
        raise FitConvergenceError(
            f"fit deviates from the Monte Carlo truth by {max_dev:.4f} nats"
        )
    deltas = (
        constants.a1 - d.a1,
        constants.a2 - d.a2,
        constants.a3 - d.a3,
        constants.a4 - d.a4,
    )
    report = FitReport(xs, ys, fitted, max_dev, constants, deltas)
    return constants, report


def run_fit(
    grid_size: int = 64, n_samples: int = 10**6, seed: int = 0
) -> tuple[KlApproxConstants, FitReport]:
    """Full pipeline: Monte Carlo grid, then the constant refit."""
    xs, ys = mc_truth_grid(grid_size, n_samples, seed)
    return fit_constants(xs, ys, seed=seed)
