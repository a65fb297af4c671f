"""Simulation of cohorts under the multiplicative intensity model and replicated experiments."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .asymptotics import PopulationModel
from .baseline import BaselineReport, baseline_variance
from .cohort import CLASSICAL, Cohort, FailureEvent, LevelSet, Subject
from .designs import SIMULATE, DesignSpec, keyed_rng, sample_cohort
from .errors import DegenerateEstimateError, DesignError
from .estimator import EstimateResult, estimate

THREADS_ENV = "MHCOHORT_THREADS"


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """A simulation experiment.

    Subjects enter at time 0 with level and stratum drawn from the
    population's cell frequencies on its first segment, and fail with hazard
    ``phi0^alpha lambda0(t)``. Follow-up ends at the population's ``tau`` or
    at a uniform censoring time on ``(0, 1 / censor_rate)`` when
    ``censor_rate > 0``.
    """

    n: int
    phi0: float
    population: PopulationModel
    design: DesignSpec = field(default_factory=DesignSpec)
    reps: int = 1
    seed: int = 0
    levels: LevelSet = CLASSICAL
    censor_rate: float = 0.0
    c: str = "equal"
    variance: str = "optional"
    baseline_times: tuple = ()

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not self.phi0 > 0:
            raise ValueError("phi0 must be positive")
        if tuple(self.levels.alphas) != tuple(self.population.alphas):
            raise ValueError("scenario levels and population levels differ")
        if self.censor_rate < 0:
            raise ValueError("censor_rate must be nonnegative")

    @classmethod
    def binary(cls, n: int, phi0: float, f1: float, tau: float, design: DesignSpec | None = None,
               lambda0: float = 1.0, q=None, f_kl=None, **kw) -> ScenarioSpec:
        """Binary exposure with constant baseline hazard."""
        pop = PopulationModel.constant([1 - f1, f1], 1.0, lambda0, tau, (0.0, 1.0), q, f_kl)
        return cls(n, phi0, pop, design or DesignSpec(), **kw)

    def to_dict(self) -> dict:
        pop = self.population
        return {
            "n": self.n,
            "phi0": self.phi0,
            "alphas": list(self.levels.alphas),
            "tau": pop.tau,
            "breaks": pop.breaks.tolist(),
            "lambda0": pop.lambda0.tolist(),
            "q": pop.q[0].tolist(),
            "f_kl": pop.f_kl[0].tolist(),
            "censor_rate": self.censor_rate,
            "design": self.design.describe(),
            "reps": self.reps,
            "seed": self.seed,
            "c": self.c,
            "variance": self.variance,
            "baseline_times": list(self.baseline_times),
        }


def _inverse_cumhaz(pop: PopulationModel, target: np.ndarray) -> np.ndarray:
    """Smallest ``t`` with ``Lambda0(t) = target``; ``inf`` beyond ``tau``."""
    inc = pop.lambda0 * pop.widths
    cum = np.concatenate([[0.0], np.cumsum(inc)])
    out = np.full(target.shape, np.inf)
    inside = target <= cum[-1]
    if not np.any(inside):
        return out
    tg = target[inside]
    seg = np.clip(np.searchsorted(cum, tg, side="left") - 1, 0, pop.segments - 1)
    lam = pop.lambda0[seg]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = pop.breaks[seg] + np.where(lam > 0, (tg - cum[seg]) / lam, 0.0)
    out[inside] = np.minimum(t, pop.tau)
    return out


def simulate_cohort(scenario: ScenarioSpec, rep: int = 0) -> Cohort:
    """One cohort drawn with the stream keyed by ``(seed, rep)``.

    Failure times use inverse transform sampling on the piecewise linear
    cumulative hazard, which is exact.
    """
    rng = keyed_rng(scenario.seed, SIMULATE, rep)
    pop = scenario.population
    n = scenario.n
    cells = pop.pi_kl[0]  # (K, L)
    K, L = cells.shape
    flat = cells.reshape(-1)
    pick = rng.choice(K * L, size=n, p=flat / flat.sum())
    level, stratum = np.divmod(pick, L)
    alphas = np.asarray(pop.alphas)
    rate = scenario.phi0 ** alphas[level]
    e = rng.exponential(size=n)
    t_fail = _inverse_cumhaz(pop, e / rate)
    if scenario.censor_rate > 0:
        t_cens = rng.uniform(0.0, 1.0 / scenario.censor_rate, size=n)
    else:
        t_cens = np.full(n, np.inf)
    end = np.minimum(np.minimum(t_fail, t_cens), pop.tau)
    failed = (t_fail <= np.minimum(t_cens, pop.tau)) & np.isfinite(t_fail)
    strata = pop.strata
    subjects = []
    failures = []
    for i in range(n):
        sid = str(i)
        intervals = ((0.0, float(end[i])),) if end[i] > 0 else ()
        subjects.append(Subject(sid, intervals, ((0.0, int(level[i])),), ((0.0, strata[stratum[i]]),)))
        if failed[i] and end[i] > 0:
            failures.append(FailureEvent(float(end[i]), sid, int(level[i])))
    return Cohort.from_subjects(subjects, pop.tau, scenario.levels, strata, failures)


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    rep: int
    failures: int
    estimate: EstimateResult | None
    baseline: BaselineReport | None = None
    error: str | None = None

    @property
    def degenerate(self) -> bool:
        return self.estimate is None or self.estimate.degenerate or not math.isfinite(self.estimate.sigma2)


def run_replication(scenario: ScenarioSpec, rep: int) -> ReplicationResult:
    """Simulate, sample each failure per the design, estimate; deterministic in ``(seed, rep)``."""
    cohort = simulate_cohort(scenario, rep)
    if not cohort.failures:
        return ReplicationResult(rep, 0, None, error="no failures")
    try:
        sampled = sample_cohort(cohort, scenario.design, scenario.seed, rep)
    except DesignError as exc:
        return ReplicationResult(rep, len(cohort.failures), None, error=str(exc))
    try:
        result = estimate(sampled, scenario.levels, scenario.c, scenario.variance, n=scenario.n)
    except DegenerateEstimateError as exc:
        return ReplicationResult(rep, len(cohort.failures), None, error=str(exc))
    base = None
    if scenario.baseline_times and not result.degenerate:
        base = baseline_variance(sampled, result.phi_hat, result.sigma2, scenario.levels, scenario.n)
    return ReplicationResult(rep, len(cohort.failures), result, base)


def _run_chunk(args):
    scenario, reps = args
    return [run_replication(scenario, r) for r in reps]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_replications(scenario: ScenarioSpec, workers: int | None = None) -> list[ReplicationResult]:
    """All replicates, ordered by replicate index whatever the worker count."""
    workers = default_workers() if workers is None else max(1, int(workers))
    reps = list(range(scenario.reps))
    if workers == 1 or len(reps) < 2:
        return [run_replication(scenario, r) for r in reps]
    chunks = [(scenario, reps[i::workers]) for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        done = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    return sorted(done, key=lambda r: r.rep)


@dataclass(frozen=True)
class MCSummary:
    reps: int
    used: int
    excluded: int
    mean_phi_hat: float
    se_mean_phi_hat: float
    empirical_var_scaled: float
    mean_sigma2_hat: float
    mean_theta_hat: float
    empirical_var_theta_scaled: float
    mean_sigma2_theta_hat: float
    coverage95: float
    mean_failures: float
    min_failures: int
    max_failures: int
    baseline: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return _finite(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def mc_summary(results: Sequence[ReplicationResult], phi0: float, n: int,
               baseline_times: Sequence[float] = (), lambda_true=None, scenario: dict | None = None) -> MCSummary:
    """Summaries across replicates; degenerate replicates are counted and dropped.

    Spread statistics need two informative replicates and are NaN (null in
    JSON) when only one is available. ``lambda_true`` maps a time to the true cumulative baseline hazard and is
    needed for the baseline diagnostics.
    """
    good = [r for r in results if not r.degenerate]
    if not good:
        raise ValueError("no informative replicates")
    spread = len(good) > 1
    nan = float("nan")
    phi = np.array([r.estimate.phi_hat for r in good])
    theta = np.log(phi)
    s2 = np.array([r.estimate.sigma2 for r in good])
    s2t = np.array([r.estimate.sigma2_theta for r in good])
    cover = np.mean([r.estimate.covers(phi0) for r in good])
    fails = np.array([r.failures for r in results])
    base = {}
    if baseline_times:
        for t in baseline_times:
            with_base = [r for r in good if r.baseline is not None]
            if not with_base:
                break
            lam = np.array([r.baseline.lambda_hat(t) for r in with_base])
            var_hat = np.array([r.baseline.sigma2_lambda(t, t) for r in with_base])
            entry = {
                "t": float(t),
                "mean_lambda_hat": float(lam.mean()),
                "se_mean_lambda_hat": float(lam.std(ddof=1) / math.sqrt(len(lam))) if len(lam) > 1 else nan,
                "empirical_var_scaled": float(n * lam.var(ddof=1)) if len(lam) > 1 else nan,
                "mean_sigma2_lambda_hat": float(var_hat.mean()),
            }
            if lambda_true is not None:
                entry["true_lambda"] = float(lambda_true(t))
            base[f"{float(t)!r}"] = entry
    return MCSummary(
        reps=len(results),
        used=len(good),
        excluded=len(results) - len(good),
        mean_phi_hat=float(phi.mean()),
        se_mean_phi_hat=float(phi.std(ddof=1) / math.sqrt(len(phi))) if spread else nan,
        empirical_var_scaled=float(n * phi.var(ddof=1)) if spread else nan,
        mean_sigma2_hat=float(s2.mean()),
        mean_theta_hat=float(theta.mean()),
        empirical_var_theta_scaled=float(n * theta.var(ddof=1)) if spread else nan,
        mean_sigma2_theta_hat=float(s2t.mean()),
        coverage95=float(cover),
        mean_failures=float(fails.mean()),
        min_failures=int(fails.min()),
        max_failures=int(fails.max()),
        baseline=base,
        scenario=scenario or {},
    )


def run_mc(scenario: ScenarioSpec, workers: int | None = None) -> tuple[MCSummary, list[ReplicationResult]]:
    """Run every replicate and summarise."""
    results = run_replications(scenario, workers)
    pop = scenario.population
    lam_true = lambda t: float(np.sum(np.clip(t - pop.breaks[:-1], 0, pop.widths) * pop.lambda0))
    summary = mc_summary(results, scenario.phi0, scenario.n, scenario.baseline_times, lam_true,
                         scenario.to_dict())
    return summary, results
