"""Weighted Breslow-type estimator of the integrated baseline hazard."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import LevelSet
from .designs import SampledFailure


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function ``t -> sum_{t_j <= t} size_j`` starting at 0."""

    jump_times: np.ndarray
    jump_sizes: np.ndarray

    @classmethod
    def from_jumps(cls, times, sizes) -> StepFunction:
        """Merge jumps that share a time."""
        times = np.asarray(times, dtype=float)
        sizes = np.asarray(sizes, dtype=float)
        if times.size == 0:
            return cls(np.zeros(0), np.zeros(0))
        order = np.argsort(times, kind="stable")
        uniq, inv = np.unique(times[order], return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inv, sizes[order])
        return cls(uniq, merged)

    def __call__(self, t):
        cum = np.concatenate([[0.0], np.cumsum(self.jump_sizes)])
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        out = cum[idx]
        return float(out) if np.ndim(out) == 0 else out

    value = __call__

    @property
    def last_time(self) -> float:
        return float(self.jump_times[-1]) if self.jump_times.size else 0.0


def _per_failure(sampled_failures: Sequence[SampledFailure], phi: float, alphas):
    """Times, ``S0 = sum phi^Z w`` and ``S1 = sum Z phi^(Z-1) w`` for each failure."""
    alphas = np.asarray(alphas, dtype=float)
    times = np.array([sf.time for sf in sampled_failures], dtype=float)
    s0 = np.empty(len(sampled_failures))
    s1 = np.empty(len(sampled_failures))
    for f, sf in enumerate(sampled_failures):
        a = alphas[sf.levels]
        s0[f] = np.sum(phi ** a * sf.weights)
        s1[f] = np.sum(a * phi ** (a - 1) * sf.weights)
    return times, s0, s1


def _inv(x, power=1):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = 1.0 / x[pos] ** power
    return out


def baseline_cumhaz(sampled_failures: Sequence[SampledFailure], phi: float,
                    levels: LevelSet | Sequence[float] = (0.0, 1.0)) -> StepFunction:
    """``Lambda_hat(t) = sum_{t_j <= t} 1 / sum_{i in r_j} phi^Z_i w_i``.

    A failure whose weighted risk set is empty contributes nothing.
    """
    alphas = levels.alphas if isinstance(levels, LevelSet) else levels
    if not sampled_failures:
        return StepFunction.from_jumps([], [])
    times, s0, _ = _per_failure(sampled_failures, phi, alphas)
    return StepFunction.from_jumps(times, _inv(s0))


@dataclass(frozen=True, eq=False)
class BaselineReport:
    """Baseline estimate with the pieces of its covariance function.

    ``sigma2_lambda(s, t)`` estimates the asymptotic covariance of
    ``sqrt(n)(Lambda_hat(s) - Lambda(s))`` and ``sqrt(n)(Lambda_hat(t) - Lambda(t))``.
    """

    lambda_hat: StepFunction
    omega2_hat: StepFunction
    B_hat: StepFunction
    sigma2: float
    n: int
    phi: float

    def sigma2_lambda(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        out = self.omega2_hat(np.minimum(s, t)) + self.B_hat(s) * self.sigma2 * self.B_hat(t)
        return float(out) if np.ndim(out) == 0 else out

    def se(self, t):
        """Standard error of ``Lambda_hat(t)``."""
        return np.sqrt(np.maximum(self.sigma2_lambda(t, t), 0.0) / self.n)

    def beyond_data(self, t):
        """True where ``t`` lies past the last failure; values there are carried forward."""
        return np.asarray(t, dtype=float) > self.lambda_hat.last_time

    def table(self, grid=None) -> np.ndarray:
        """Rows ``(t, lambda_hat, omega2_hat, B_hat, se_lambda)``; the default grid is the jump times."""
        grid = self.lambda_hat.jump_times if grid is None else np.asarray(grid, dtype=float)
        return np.column_stack([grid, self.lambda_hat(grid), self.omega2_hat(grid),
                                self.B_hat(grid), self.se(grid)]) if len(grid) else np.zeros((0, 5))


def baseline_variance(sampled_failures: Sequence[SampledFailure], phi: float, sigma2: float,
                      levels: LevelSet | Sequence[float] = (0.0, 1.0), n: int | None = None) -> BaselineReport:
    """Baseline estimate with ``omega2_hat``, ``B_hat`` and the covariance function.

    Parameters
    ----------
    sampled_failures : sequence of SampledFailure
    phi : float
        Rate-ratio estimate.
    sigma2 : float
        Estimated asymptotic variance of ``sqrt(n)(phi_hat - phi)``; a NaN is
        treated as zero so the report still carries the pure-baseline term.
    n : int, optional
        Cohort size; defaults to the largest risk-set size.
    """
    alphas = levels.alphas if isinstance(levels, LevelSet) else levels
    if n is None:
        n = max((sf.n_t for sf in sampled_failures), default=1)
    if not math.isfinite(sigma2):
        sigma2 = 0.0
    if not sampled_failures:
        empty = StepFunction.from_jumps([], [])
        return BaselineReport(empty, empty, empty, sigma2, n, phi)
    times, s0, s1 = _per_failure(sampled_failures, phi, alphas)
    inv2 = _inv(s0, 2)
    return BaselineReport(
        lambda_hat=StepFunction.from_jumps(times, _inv(s0)),
        omega2_hat=StepFunction.from_jumps(times, n * inv2),
        B_hat=StepFunction.from_jumps(times, s1 * inv2),
        sigma2=float(sigma2),
        n=int(n),
        phi=float(phi),
    )


BASELINE_COLUMNS = ("t", "lambda_hat", "omega2_hat", "B_hat", "se_lambda")


def write_baseline_csv(path, report: BaselineReport, grid=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BASELINE_COLUMNS)
        for row in report.table(grid):
            w.writerow([repr(float(x)) for x in row])
