"""Generalized Mantel-Haenszel rate-ratio estimation from sampled risk sets.

With canonical normalisation every failure contributes its vector of level
shares ``s_k = n(t)^-1 sum_{i in r, Z_i = k} w_i`` (so ``sum_k s_k = 1``), and

    R_jk = sum over failures whose case has level j of s_k.

For pairs ``j < k`` let ``G_jk(phi) = phi^a_k R_jk - phi^a_j R_kj``. The
estimate solves ``U(phi) = n^-1 sum c_jk G_jk G_jk' = 0``; in the classical
binary case it is ``R_10 / R_01``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .cohort import LevelSet
from .designs import SampledFailure
from .errors import DegenerateEstimateError, DesignError, NotPositiveDefiniteError

PHI_MIN, PHI_MAX = 1e-6, 1e6
GRID_POINTS = 400
DEGENERATE_REASONS = ("no_information", "zero_estimate", "infinite_estimate", "no_root")
Z95 = 1.959963984540054


def pairs(size: int) -> list[tuple[int, int]]:
    """Level pairs ``j < k`` in lexicographic order."""
    return [(j, k) for j in range(size) for k in range(j + 1, size)]


def falling(a, p: int):
    """Falling factorial ``(a)_p``; works elementwise on arrays."""
    out = np.ones_like(np.asarray(a, dtype=float))
    for i in range(p):
        out = out * (np.asarray(a, dtype=float) - i)
    return out


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """Per-failure shares and the accumulated ``R`` matrix.

    Attributes
    ----------
    alphas : ndarray, shape (K,)
    case_levels : ndarray, shape (F,)
    shares : ndarray, shape (F, K)
        Row ``f`` is the share vector of failure ``f``.
    n_t : ndarray, shape (F,)
    R : ndarray, shape (K, K)
        ``R[j, k]``; the diagonal is carried along but never used.
    n : int
        Cohort size used for scaling.
    c : ndarray
        Pair weights in the order of :func:`pairs`.
    """

    alphas: np.ndarray
    case_levels: np.ndarray
    shares: np.ndarray
    n_t: np.ndarray
    times: np.ndarray
    R: np.ndarray
    n: int
    c: np.ndarray

    @property
    def eta(self) -> int:
        return len(self.alphas) - 1

    @property
    def failures(self) -> int:
        return len(self.case_levels)

    @property
    def is_classical(self) -> bool:
        return len(self.alphas) == 2 and self.alphas[1] == 1.0

    def with_c(self, c) -> EstimatorState:
        c = np.asarray(c, dtype=float).reshape(-1)
        if c.shape != (len(pairs(len(self.alphas))),):
            raise ValueError(f"c needs {len(pairs(len(self.alphas)))} entries")
        return EstimatorState(self.alphas, self.case_levels, self.shares, self.n_t,
                              self.times, self.R, self.n, c)


def state_from_shares(alphas, case_levels, shares, n: int, n_t=None, times=None, c=None) -> EstimatorState:
    """Build a state directly from per-failure share vectors."""
    alphas = np.asarray(alphas, dtype=float)
    K = len(alphas)
    case_levels = np.asarray(case_levels, dtype=np.int64).reshape(-1)
    shares = np.asarray(shares, dtype=float).reshape(-1, K)
    if len(case_levels) != len(shares):
        raise ValueError("one case level per share vector")
    if np.any(shares < 0):
        raise ValueError("shares must be nonnegative")
    if np.any((case_levels < 0) | (case_levels >= K)):
        raise ValueError("case level outside the level set")
    R = np.zeros((K, K))
    np.add.at(R, case_levels, shares)
    if c is None:
        c = np.ones(len(pairs(K)))
    F = len(case_levels)
    n_t = np.full(F, n, dtype=float) if n_t is None else np.asarray(n_t, dtype=float)
    times = np.arange(1.0, F + 1) if times is None else np.asarray(times, dtype=float)
    return EstimatorState(alphas, case_levels, shares, n_t, times, R, int(n), np.asarray(c, dtype=float))


def state_from_R(alphas, R, n: int = 1, c=None) -> EstimatorState:
    """State carrying only an ``R`` matrix (no per-failure detail)."""
    alphas = np.asarray(alphas, dtype=float)
    K = len(alphas)
    R = np.asarray(R, dtype=float).reshape(K, K)
    if c is None:
        c = np.ones(len(pairs(K)))
    empty = np.zeros(0)
    return EstimatorState(alphas, empty.astype(np.int64), np.zeros((0, K)), empty, empty, R,
                          int(n), np.asarray(c, dtype=float))


def accumulate(sampled_failures: Sequence[SampledFailure], levels: LevelSet,
               n: int | None = None, c=None) -> EstimatorState:
    """Accumulate ``R_jk`` and the per-failure share vectors.

    Parameters
    ----------
    sampled_failures : sequence of SampledFailure
    levels : LevelSet
    n : int, optional
        Cohort size. Defaults to the largest risk-set size seen, which leaves
        ``sigma2 / n`` and hence every confidence interval unchanged.
    c : array_like, optional
        Pair weights; equal by default.
    """
    if not sampled_failures:
        raise DegenerateEstimateError("no failures to accumulate")
    K = levels.size
    shares = np.empty((len(sampled_failures), K))
    case_levels = np.empty(len(sampled_failures), dtype=np.int64)
    n_t = np.empty(len(sampled_failures))
    times = np.empty(len(sampled_failures))
    for f, sf in enumerate(sampled_failures):
        if not 0 <= sf.case_level_index < K:
            raise DesignError(f"case level {sf.case_level_index} outside the level set")
        if np.any(sf.weights <= 0):
            raise DesignError("weights must be positive")
        if np.any((sf.levels < 0) | (sf.levels >= K)):
            raise DesignError("member level outside the level set")
        shares[f] = sf.shares(K)
        case_levels[f] = sf.case_level_index
        n_t[f] = sf.n_t
        times[f] = sf.time
    if n is None:
        n = int(n_t.max())
    return state_from_shares(levels.alphas, case_levels, shares, n, n_t, times, c)


def g_value(state: EstimatorState, j: int, k: int, phi: float, p: int = 0) -> float:
    """``p``-th derivative of ``G_jk`` at ``phi``."""
    a = state.alphas
    return float(falling(a[k], p) * phi ** (a[k] - p) * state.R[j, k]
                 - falling(a[j], p) * phi ** (a[j] - p) * state.R[k, j])


def _g_all(state: EstimatorState, phi, p: int = 0) -> np.ndarray:
    """``G^(p)`` for every pair; ``phi`` may be an array (pairs along the last axis)."""
    a = state.alphas
    J, K = np.array(pairs(len(a))).T
    phi = np.asarray(phi, dtype=float)[..., None]
    return (falling(a[K], p) * phi ** (a[K] - p) * state.R[J, K]
            - falling(a[J], p) * phi ** (a[J] - p) * state.R[K, J])


def score(state: EstimatorState, phi) -> np.ndarray | float:
    """``U(phi) = n^-1 sum_{j<k} c_jk G_jk(phi) G_jk'(phi)``."""
    out = (_g_all(state, phi, 0) * _g_all(state, phi, 1)) @ state.c / state.n
    return float(out) if np.ndim(out) == 0 else out


def ssq(state: EstimatorState, phi) -> np.ndarray | float:
    """Weighted sum of squares ``n^-1 sum c_jk G_jk(phi)^2``; ``U`` is half its derivative."""
    out = _g_all(state, phi, 0) ** 2 @ state.c / state.n
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SolveOptions:
    phi_min: float = PHI_MIN
    phi_max: float = PHI_MAX
    grid_points: int = GRID_POINTS
    near: float | None = None


def _check_nontrivial(state: EstimatorState):
    ok = any(c > 0 and state.R[j, k] + state.R[k, j] > 0
             for c, (j, k) in zip(state.c, pairs(len(state.alphas))))
    if not ok:
        raise DegenerateEstimateError("no pair with positive weight carries information")


def solve_phi(state: EstimatorState, options: SolveOptions | None = None) -> float:
    """Root of the estimating equation.

    A single pair has the closed form ``(R_10 / R_01)^(1/alpha_1)``. Otherwise
    sign changes of ``U`` on a log grid are refined by Brent's method in
    ``log phi``; when several roots exist the one with the smallest weighted
    sum of squares is returned, or, if some ``c_jk`` are negative, the root
    closest to ``options.near``.

    Raises
    ------
    DegenerateEstimateError
        When no finite positive root exists.
    """
    opts = options or SolveOptions()
    _check_nontrivial(state)
    if len(state.alphas) == 2:
        r10, r01 = state.R[1, 0], state.R[0, 1]
        if r01 <= 0:
            raise DegenerateEstimateError("R_01 = 0: estimate is infinite", "infinite_estimate")
        if r10 <= 0:
            raise DegenerateEstimateError("R_10 = 0: estimate is zero", "zero_estimate")
        ratio = r10 / r01
        return float(ratio) if state.alphas[1] == 1.0 else float(ratio ** (1.0 / state.alphas[1]))

    lo, hi = math.log(opts.phi_min), math.log(opts.phi_max)
    theta = np.linspace(lo, hi, opts.grid_points)
    # scale by phi so the score keeps a usable magnitude across the window
    u = score(state, np.exp(theta)) * np.exp(theta)
    roots = [float(np.exp(t)) for t, v in zip(theta, u) if v == 0.0]
    f = lambda t: score(state, math.exp(t))
    for i in np.flatnonzero(np.sign(u[:-1]) * np.sign(u[1:]) < 0):
        t = optimize.brentq(f, theta[i], theta[i + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
        roots.append(math.exp(t))
    if not roots:
        raise DegenerateEstimateError("estimating equation has no sign change in the search window", "no_root")
    if len(roots) == 1:
        return roots[0]
    if np.any(state.c < 0) and opts.near is not None:
        return min(roots, key=lambda r: abs(math.log(r) - math.log(opts.near)))
    values = ssq(state, np.array(roots))
    return roots[int(np.argmin(values))]


def _sym3(T: np.ndarray) -> np.ndarray:
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    return sum(np.transpose(T, p) for p in perms) / 6.0


def i_pair(state: EstimatorState, phi: float) -> np.ndarray:
    """``I_jk`` estimate ``n^-1 (phi^-a_j R_jk + phi^-a_k R_kj) / 2``."""
    scaled = phi ** (-state.alphas)[:, None] * state.R
    return (scaled + scaled.T) / (2.0 * state.n)


def optional_variation(state: EstimatorState, phi: float) -> tuple[np.ndarray, np.ndarray]:
    """Triple and pair integrals from the scaled optional variation.

    The covariation ``[W_ik, W_ic]`` adds ``s_k s_c`` for each failure whose
    case has level ``i``. Each ordering of the index triple yields an
    estimate of the same integral; they are averaged with equal weight.

    Returns
    -------
    I3 : ndarray, shape (K, K, K)
        Symmetric estimate of ``I_jkq``.
    I2 : ndarray, shape (K, K)
        Symmetric estimate of ``I_jk``.
    """
    K = len(state.alphas)
    M = np.zeros((K, K, K))
    if state.failures:
        np.add.at(M, state.case_levels, np.einsum("fk,fc->fkc", state.shares, state.shares))
    T = phi ** (-state.alphas)[:, None, None] * M / state.n
    return _sym3(T), i_pair(state, phi)


def model_variation(state: EstimatorState, phi: float) -> tuple[np.ndarray, np.ndarray]:
    """Triple and pair integrals from the estimated predictable variation.

    Every failure adds ``s_a s_b s_c / sum_k phi^a_k s_k`` regardless of the
    case level.
    """
    s = state.shares
    denom = s @ (phi ** state.alphas)
    if np.any(denom <= 0):
        raise DegenerateEstimateError("a failure has an empty weighted risk set")
    I3 = np.einsum("fa,fb,fc,f->abc", s, s, s, 1.0 / denom) / state.n
    return I3, i_pair(state, phi)


@dataclass(frozen=True, eq=False)
class VarianceReport:
    phi_hat: float
    sigma2: float
    sigma2_theta: float
    I_hat_jk: np.ndarray
    I_hat_jkq: np.ndarray
    beta_hat: np.ndarray
    Gamma_hat: np.ndarray
    gamma_hat: float
    c: np.ndarray
    method: str


def beta_gamma(alphas, I2: np.ndarray, I3: np.ndarray, phi: float) -> tuple[np.ndarray, np.ndarray]:
    """Pair slopes ``beta_jk`` and the pair covariance matrix ``Gamma``."""
    a = np.asarray(alphas, dtype=float)
    P = pairs(len(a))
    beta = np.array([(a[k] - a[j]) * phi ** (a[k] + a[j] - 1) * I2[j, k] for j, k in P])
    G = np.empty((len(P), len(P)))
    for x, (j, k) in enumerate(P):
        for y, (p, q) in enumerate(P):
            G[x, y] = (phi ** (a[j] + a[k] + a[q]) * ((j == p) - (k == p)) * I3[j, k, q]
                       + phi ** (a[j] + a[k] + a[p]) * ((k == q) - (j == q)) * I3[j, k, p])
    return beta, G


def sigma2_from(beta: np.ndarray, Gamma: np.ndarray, c: np.ndarray) -> float:
    """``v^2 / gamma^2`` with ``v^2 = c'B Gamma B c`` and ``gamma = sum c beta^2``."""
    c = np.asarray(c, dtype=float)
    gamma = float(c @ beta ** 2)
    if gamma == 0:
        raise DegenerateEstimateError("gamma is zero: data carry no information")
    bc = beta * c
    return float(bc @ Gamma @ bc) / gamma ** 2


def variance(state: EstimatorState, I: tuple[np.ndarray, np.ndarray], phi: float,
             method: str = "optional") -> VarianceReport:
    """Assemble the sandwich variance of ``sqrt(n)(phi_hat - phi)``."""
    I3, I2 = I
    beta, G = beta_gamma(state.alphas, I2, I3, phi)
    gamma = float(state.c @ beta ** 2)
    if gamma == 0:
        raise DegenerateEstimateError("gamma is zero: data carry no information")
    s2 = sigma2_from(beta, G, state.c)
    return VarianceReport(phi, s2, s2 / phi ** 2, I2, I3, beta, G, gamma, state.c, method)


def optimal_c(beta, Gamma) -> tuple[np.ndarray, float]:
    """Pair weights minimising ``v^2 / gamma^2``.

    With ``B = diag(beta)`` and ``B Gamma B = M'M`` (Cholesky), the optimum is
    ``c = M^-1 d`` where ``d = (M^-1)' B^2 1`` spans the range of the rank-one
    matrix ``X = (M^-1)' B^2 1 1' B^2 M^-1``; the attained variance is
    ``1 / lambda_max(X) = 1 / d'd``.

    Returns
    -------
    c : ndarray
        Scaled so that its largest absolute entry is one.
    sigma2 : float

    Raises
    ------
    NotPositiveDefiniteError
        If ``B Gamma B`` is not positive definite.
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    Gamma = np.asarray(Gamma, dtype=float).reshape(len(beta), len(beta))
    if np.any(beta == 0):
        raise NotPositiveDefiniteError("a pair has zero slope")
    A = beta[:, None] * Gamma * beta[None, :]
    A = (A + A.T) / 2
    try:
        L = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("B Gamma B is not positive definite") from None
    u = beta ** 2
    d = linalg.solve_triangular(L, u, lower=True)
    c = linalg.solve_triangular(L.T, d, lower=False)
    lam = float(d @ d)
    return c / np.max(np.abs(c)), 1.0 / lam


# --------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class EstimateResult:
    phi_hat: float
    theta_hat: float
    sigma2: float
    sigma2_theta: float
    ci_low: float
    ci_high: float
    n: int
    failures: int
    c_weights: tuple
    variance_method: str
    degenerate_flags: tuple = ()
    report: VarianceReport | None = field(default=None, compare=False, repr=False)
    detail: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def degenerate(self) -> bool:
        """True when no usable estimate or variance exists; warning-only flags do not count."""
        return any(f in DEGENERATE_REASONS for f in self.degenerate_flags)

    def covers(self, phi0: float) -> bool:
        return bool(self.ci_low <= phi0 <= self.ci_high)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x
        return {
            "phi_hat": clean(float(self.phi_hat)),
            "theta_hat": clean(float(self.theta_hat)),
            "sigma2": clean(float(self.sigma2)),
            "sigma2_theta": clean(float(self.sigma2_theta)),
            "ci_low": clean(float(self.ci_low)),
            "ci_high": clean(float(self.ci_high)),
            "n": int(self.n),
            "failures": int(self.failures),
            "c_weights": [float(c) for c in self.c_weights],
            "variance_method": self.variance_method,
            "degenerate_flags": list(self.degenerate_flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _result(state, phi, report, method, flags, c) -> EstimateResult:
    nan = float("nan")
    if phi is None or not phi > 0:
        theta = -math.inf if phi == 0 else nan
        return EstimateResult(nan if phi is None else phi, theta, nan, nan, nan, nan, state.n,
                              state.failures, tuple(c), method, tuple(flags), report)
    theta = math.log(phi)
    if report is None:
        return EstimateResult(phi, theta, nan, nan, nan, nan, state.n, state.failures,
                              tuple(c), method, tuple(flags))
    half = Z95 * math.sqrt(max(report.sigma2_theta, 0.0) / state.n)
    return EstimateResult(phi, theta, report.sigma2, report.sigma2_theta,
                          math.exp(theta - half), math.exp(theta + half), state.n,
                          state.failures, tuple(float(x) for x in c), method, tuple(flags), report)


def _variation(state, phi, method):
    if method == "optional":
        return optional_variation(state, phi)
    if method in ("model", "model_based"):
        return model_variation(state, phi)
    raise ValueError(f"unknown variance method {method!r}")


def estimate_state(state: EstimatorState, c="equal", variance_method: str = "optional",
                   options: SolveOptions | None = None) -> EstimateResult:
    """Solve and attach a variance to an accumulated state.

    ``c`` is ``"equal"``, ``"optimal"`` (two stages: equal weights first, then
    the weights minimising the estimated variance) or an explicit vector.
    Degenerate data produce a result with NaN fields and flags rather than an
    exception.
    """
    method = "model" if variance_method in ("model", "model_based") else variance_method
    if method not in ("optional", "model"):
        raise ValueError(f"unknown variance method {variance_method!r}")
    P = len(pairs(len(state.alphas)))
    flags: list[str] = []
    if isinstance(c, str):
        if c not in ("equal", "optimal"):
            raise ValueError(f"unknown c option {c!r}")
        state = state.with_c(np.ones(P))
        mode = c
    else:
        state = state.with_c(c)
        mode = "custom"
    try:
        phi = solve_phi(state, options)
    except DegenerateEstimateError as exc:
        flags.append(exc.reason)
        phi = 0.0 if flags[-1] == "zero_estimate" else None
        return _result(state, phi, None, method, flags, state.c)
    try:
        report = variance(state, _variation(state, phi, method), phi, method)
    except DegenerateEstimateError:
        flags.append("no_information")
        return _result(state, phi, None, method, flags, state.c)
    if mode == "optimal" and P > 1:
        try:
            c_opt, _ = optimal_c(report.beta_hat, report.Gamma_hat)
        except NotPositiveDefiniteError:
            warnings.warn("estimated pair covariance is not positive definite; keeping equal weights",
                          RuntimeWarning, stacklevel=2)
            flags.append("gamma_not_pd")
            return _result(state, phi, report, method, flags, state.c)
        stage2 = state.with_c(c_opt)
        opts = options or SolveOptions()
        try:
            phi2 = solve_phi(stage2, SolveOptions(opts.phi_min, opts.phi_max, opts.grid_points, near=phi))
            report = variance(stage2, _variation(stage2, phi2, method), phi2, method)
        except DegenerateEstimateError:
            flags.append("optimal_stage_failed")
            return _result(state, phi, report, method, flags, state.c)
        return _result(stage2, phi2, report, method, flags, c_opt)
    return _result(state, phi, report, method, flags, state.c)


def estimate(sampled_failures: Sequence[SampledFailure], levels: LevelSet, c="equal",
             variance_method: str = "optional", n: int | None = None,
             options: SolveOptions | None = None) -> EstimateResult:
    """Full pipeline: accumulate, solve, variance, Wald interval on ``log phi``."""
    state = accumulate(sampled_failures, levels, n)
    return estimate_state(state, c, variance_method, options)


def estimate_stratified(groups, levels: LevelSet, c="equal", variance_method: str = "optional",
                        n: int | None = None, options: SolveOptions | None = None) -> EstimateResult:
    """Estimate for matched data where each stratum may have its own baseline.

    ``groups`` maps stratum label to that stratum's sampled failures (a flat
    list is grouped by the case stratum). The point estimate is the pooled
    one. The variance integrals are accumulated stratum by stratum and
    summed; since both variation estimators are sums over failures the total
    agrees with the pooled accumulation. Per-stratum integrals are returned
    in ``result.detail``.
    """
    if not isinstance(groups, dict):
        grouped: dict = {}
        for sf in groups:
            grouped.setdefault(sf.case_stratum, []).append(sf)
        groups = grouped
    flat = []
    for label, failures in groups.items():
        for sf in failures:
            if any(s != label for s in sf.strata):
                raise DesignError(f"failure at {sf.time}: sampled set crosses strata")
            flat.append(sf)
    flat.sort(key=lambda sf: sf.time)
    pooled = accumulate(flat, levels, n)
    result = estimate_state(pooled, c, variance_method, options)
    if result.report is None:
        return result
    phi = result.phi_hat
    state_c = pooled.with_c(np.asarray(result.c_weights))
    per = {}
    I3 = np.zeros_like(result.report.I_hat_jkq)
    I2 = np.zeros_like(result.report.I_hat_jk)
    for label, failures in groups.items():
        if not failures:
            continue
        st = accumulate(failures, levels, pooled.n)
        J3, J2 = _variation(st, phi, result.variance_method)
        per[label] = {"I_hat_jk": J2, "I_hat_jkq": J3, "failures": len(failures)}
        I3 += J3
        I2 += J2
    report = variance(state_c, (I3, I2), phi, result.variance_method)
    out = _result(state_c, phi, report, result.variance_method, result.degenerate_flags, result.c_weights)
    return EstimateResult(**{**out.__dict__, "detail": {"strata": per}})
