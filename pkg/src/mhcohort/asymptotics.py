"""Large-cohort limits: h-functions, asymptotic variances, efficiency curves.

The population is described by time-constant-per-segment limits of the at-risk
fraction ``p(t)``, stratum frequencies ``q_l(t)``, level frequencies within
strata ``f_{k,l}(t)`` and the baseline hazard ``lambda0(t)``. Every integral
over ``[0, tau]`` is therefore an exact finite sum.

As ``n`` grows the share vector ``s`` of a sampled risk set has a limiting law
that depends on the design:

* full cohort: ``s = f`` deterministically;
* simple random sampling of size ``m``: ``s = Y / m`` with ``Y ~ Mult(f, m)``;
* matching: stratum ``l`` with probability ``q_l``, then ``s = Y_l / m_l``
  with ``Y_l ~ Mult(f_l, m_l)``;
* counter-matching: ``s = sum_l Y_l q_l / m_l`` with independent
  ``Y_l ~ Mult(f_l, m_l)``.

For a multiset ``v`` of levels, ``h_v(t) = p(t) E[prod_{k in v} s_k]``.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial
from typing import Callable, Iterable, Sequence

import numpy as np

from .designs import DesignSpec
from .errors import DegenerateEstimateError, DesignError
from .estimator import beta_gamma, pairs, sigma2_from

MAX_MULTINOMIAL_M = 30


# --------------------------------------------------------------------------
# populations


@dataclass(frozen=True, eq=False)
class PopulationModel:
    """Piecewise-constant population limits on ``(breaks[i], breaks[i+1]]``.

    Attributes
    ----------
    breaks : ndarray, shape (S + 1,)
        ``0 = b_0 < ... < b_S = tau``.
    p : ndarray, shape (S,)
    lambda0 : ndarray, shape (S,)
    q : ndarray, shape (S, L)
    f_kl : ndarray, shape (S, L, K)
        Level frequencies within each stratum.
    alphas : tuple of float
    lambda_strata : ndarray, shape (S, L), optional
        Stratum-specific baselines for the matching model with separate
        baselines; ``None`` means every stratum uses ``lambda0``.
    """

    breaks: np.ndarray
    p: np.ndarray
    lambda0: np.ndarray
    q: np.ndarray
    f_kl: np.ndarray
    alphas: tuple = (0.0, 1.0)
    lambda_strata: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        S = len(b) - 1
        if S < 1 or b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError("breaks must start at 0 and increase")
        p = np.broadcast_to(np.asarray(self.p, dtype=float), (S,)).copy()
        lam = np.broadcast_to(np.asarray(self.lambda0, dtype=float), (S,)).copy()
        fkl = np.asarray(self.f_kl, dtype=float)
        if fkl.ndim == 2:
            fkl = np.broadcast_to(fkl, (S,) + fkl.shape).copy()
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = np.broadcast_to(q, (S, len(q))).copy()
        if fkl.shape[:2] != q.shape or fkl.shape[0] != S:
            raise ValueError("q and f_kl shapes disagree")
        alphas = tuple(float(a) for a in self.alphas)
        if fkl.shape[2] != len(alphas):
            raise ValueError("f_kl has the wrong number of levels")
        if np.any(p < 0) or np.any(p > 1) or np.any(lam < 0):
            raise ValueError("p must lie in [0, 1] and lambda0 be nonnegative")
        if np.any(q < 0) or not np.allclose(q.sum(axis=1), 1):
            raise ValueError("stratum frequencies must sum to one")
        ok = np.isclose(fkl.sum(axis=2), 1) | (q == 0)
        if np.any(fkl < 0) or not np.all(ok):
            raise ValueError("level frequencies within each stratum must sum to one")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "lambda0", lam)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "f_kl", fkl)
        object.__setattr__(self, "alphas", alphas)
        if self.lambda_strata is not None:
            ls = np.broadcast_to(np.asarray(self.lambda_strata, dtype=float), q.shape).copy()
            object.__setattr__(self, "lambda_strata", ls)

    @classmethod
    def constant(cls, f, p: float = 1.0, lambda0: float = 1.0, tau: float = 1.0,
                 alphas=None, q=None, f_kl=None, lambda_strata=None) -> PopulationModel:
        """Time-constant population on ``[0, tau]``; one stratum unless ``q`` and ``f_kl`` are given."""
        f = np.asarray(f, dtype=float)
        if alphas is None:
            alphas = tuple(range(len(f)))
        if q is None:
            q, f_kl = np.ones(1), f[None, :]
        return cls(np.array([0.0, tau]), p, lambda0, np.asarray(q, dtype=float)[None, :],
                   np.asarray(f_kl, dtype=float)[None, :, :], alphas,
                   None if lambda_strata is None else np.asarray(lambda_strata, dtype=float)[None, :])

    @property
    def tau(self) -> float:
        return float(self.breaks[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breaks)

    @property
    def segments(self) -> int:
        return len(self.p)

    @property
    def n_strata(self) -> int:
        return self.q.shape[1]

    @property
    def strata(self) -> tuple[str, ...]:
        return tuple(str(l) for l in range(self.n_strata))

    @property
    def f(self) -> np.ndarray:
        """Marginal level frequencies, shape (S, K)."""
        return np.einsum("sl,slk->sk", self.q, self.f_kl)

    @property
    def pi_kl(self) -> np.ndarray:
        """Joint level-by-stratum frequencies, shape (S, K, L)."""
        return np.einsum("sl,slk->skl", self.q, self.f_kl)

    def integrate(self, values, hazard=None) -> float:
        """``int values(t) lambda0(t) dt`` for segment values."""
        lam = self.lambda0 if hazard is None else hazard
        return float(np.sum(np.asarray(values, dtype=float) * lam * self.widths))

    def cumulative(self, values, t, hazard=None):
        """``int_0^t values(u) lambda0(u) du``."""
        lam = self.lambda0 if hazard is None else hazard
        dens = np.asarray(values, dtype=float) * lam
        t = np.asarray(t, dtype=float)
        lo = self.breaks[:-1]
        overlap = np.clip(t[..., None] - lo, 0, self.widths)
        out = overlap @ dens
        return float(out) if np.ndim(out) == 0 else out

    def segment_of(self, t) -> np.ndarray:
        """Segment index containing ``t`` under ``(b_i, b_{i+1}]`` semantics."""
        idx = np.searchsorted(self.breaks, np.asarray(t, dtype=float), side="left") - 1
        return np.clip(idx, 0, self.segments - 1)

    def marginal(self) -> PopulationModel:
        """Collapse strata into a single stratum."""
        return PopulationModel(self.breaks, self.p, self.lambda0, np.ones((self.segments, 1)),
                               self.f[:, None, :], self.alphas)


@dataclass(frozen=True)
class SensSpecModel:
    """Binary exposure prevalence with a binary surrogate of given sensitivity and specificity."""

    f1: float
    delta: float
    gamma_spec: float

    def __post_init__(self):
        for name in ("f1", "delta", "gamma_spec"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def cells(self) -> np.ndarray:
        """Joint frequencies ``pi[k, l]`` of exposure ``k`` and surrogate ``l``."""
        f1, d, g = self.f1, self.delta, self.gamma_spec
        f0 = 1 - f1
        return np.array([[g * f0, (1 - g) * f0],
                         [(1 - d) * f1, d * f1]])

    def null_factor(self) -> float:
        """Efficiency factor ``(1 - delta)(1 - gamma) + gamma delta`` of the (1, 1) design at the null."""
        return (1 - self.delta) * (1 - self.gamma_spec) + self.gamma_spec * self.delta


def cm_population(model: SensSpecModel, p: float = 1.0, lambda0: float = 1.0, tau: float = 1.0) -> PopulationModel:
    """Two-stratum population where the stratum is a surrogate for a binary exposure."""
    pi = model.cells()
    q = pi.sum(axis=0)
    if np.any(q == 0):
        raise DesignError("a surrogate stratum is empty")
    f_kl = (pi / q).T
    return PopulationModel.constant(pi.sum(axis=1), p, lambda0, tau, (0.0, 1.0), q, f_kl)


def depleting_population(f, phi0: float, tau: float, lambda0: float = 1.0, alphas=None,
                         q=None, f_kl=None, segments: int = 200,
                         censor_rate: float = 0.0) -> PopulationModel:
    """Population whose composition drifts as higher-risk subjects fail first.

    Starting from frequencies at time 0 with everyone at risk, a subject in
    cell ``(k, l)`` remains at risk at ``t`` with probability
    ``exp(-phi0^a_k lambda0 t) (1 - censor_rate t)`` (uniform censoring over
    ``[0, 1 / censor_rate]``). Each of ``segments`` equal pieces uses the
    midpoint value.
    """
    f = np.asarray(f, dtype=float)
    if alphas is None:
        alphas = tuple(range(len(f)))
    a = np.asarray(alphas, dtype=float)
    if q is None:
        q, f_kl = np.ones(1), f[None, :]
    q = np.asarray(q, dtype=float)
    f_kl = np.asarray(f_kl, dtype=float)
    breaks = np.linspace(0.0, tau, segments + 1)
    mid = (breaks[:-1] + breaks[1:]) / 2
    surv = np.exp(-np.outer(mid, phi0 ** a) * lambda0)
    cens = np.clip(1 - censor_rate * mid, 0, 1)
    cell = q[None, :, None] * f_kl[None, :, :] * surv[:, None, :] * cens[:, None, None]
    p = cell.sum(axis=(1, 2))
    ql = cell.sum(axis=2)
    fkl = cell / np.where(ql > 0, ql, 1)[:, :, None]
    return PopulationModel(breaks, p, lambda0, ql / p[:, None], fkl, alphas)


def failure_fraction(f, phi0: float, tau: float, lambda0: float = 1.0, alphas=None) -> float:
    """Expected fraction of the cohort failing by ``tau`` without censoring."""
    f = np.asarray(f, dtype=float)
    a = np.arange(len(f)) if alphas is None else np.asarray(alphas, dtype=float)
    return float(1 - np.sum(f * np.exp(-phi0 ** a * lambda0 * tau)))


def tau_for_failure_fraction(target: float, f, phi0: float, lambda0: float = 1.0, alphas=None) -> float:
    """Follow-up length giving an expected failure fraction of ``target``."""
    from scipy.optimize import brentq

    if not 0 < target < 1:
        raise ValueError("target fraction must lie in (0, 1)")
    hi = 1.0
    while failure_fraction(f, phi0, hi, lambda0, alphas) < target:
        hi *= 2
    return float(brentq(lambda t: failure_fraction(f, phi0, t, lambda0, alphas) - target, 0.0, hi, xtol=1e-14))


# --------------------------------------------------------------------------
# exact helpers


def falling_factorial(a, p: int):
    """``(a)_p = a (a - 1) ... (a - p + 1)``; exact for ints and Fractions."""
    if p < 0:
        raise ValueError("p must be nonnegative")
    out = 1
    for i in range(p):
        out = out * (a - i)
    return out


def compositions(m: int, parts: int):
    """All nonnegative integer vectors of length ``parts`` summing to ``m``."""
    if parts == 1:
        yield (m,)
        return
    for i in range(m, -1, -1):
        for rest in compositions(m - i, parts - 1):
            yield (i,) + rest


@lru_cache(maxsize=None)
def _composition_array(m: int, parts: int) -> np.ndarray:
    return np.array(list(compositions(m, parts)), dtype=np.int64).reshape(-1, parts)


def _multinomial_coef(x) -> int:
    out = factorial(sum(x))
    for xi in x:
        out //= factorial(xi)
    return out


def _check_v(v, size):
    v = tuple(int(k) for k in v)
    if len(v) > 3:
        raise ValueError("moments are supported up to order 3")
    if any(k < 0 or k >= size for k in v):
        raise ValueError("level index outside the frequency vector")
    return v


def hypergeom_moment(n_vec: Sequence[int], m: int, v: Iterable[int]) -> Fraction:
    """Exact ``E prod_{k in v} X_k`` for ``X ~ H(n_vec, m)`` by enumerating the pmf."""
    n_vec = [int(x) for x in n_vec]
    N = sum(n_vec)
    if m < 0 or m > N or min(n_vec) < 0:
        raise ValueError("invalid hypergeometric parameters")
    v = _check_v(v, len(n_vec))
    total = Fraction(0)
    denom = comb(N, m)
    for x in compositions(m, len(n_vec)):
        if any(xi > ni for xi, ni in zip(x, n_vec)):
            continue
        w = 1
        for xi, ni in zip(x, n_vec):
            w *= comb(ni, xi)
        prod = 1
        for k in v:
            prod *= x[k]
        total += Fraction(w * prod, denom)
    return total


def _pattern(v):
    """Group ``v`` into (level, multiplicity) with multiplicities descending."""
    return sorted(Counter(v).items(), key=lambda kv: (-kv[1], kv[0]))


def _moment_from_factorial(v, m, fact: Callable[[dict], object]):
    """Moment formulas of order <= 3 written in terms of factorial moments.

    ``fact({k: b_k})`` must return ``E prod (X_k)_{b_k}`` divided by
    ``(m)_{sum b}``; for the multinomial limit that is ``prod f_k^b_k``.
    """
    pat = _pattern(v)
    shape = tuple(c for _, c in pat)
    ks = [k for k, _ in pat]
    if shape == ():
        return 1
    if shape == (1,):
        return m * fact({ks[0]: 1})
    if shape == (1, 1):
        return falling_factorial(m, 2) * fact({ks[0]: 1, ks[1]: 1})
    if shape == (2,):
        j = ks[0]
        return m * fact({j: 1}) + falling_factorial(m, 2) * fact({j: 2})
    if shape == (1, 1, 1):
        return falling_factorial(m, 3) * fact({ks[0]: 1, ks[1]: 1, ks[2]: 1})
    if shape == (2, 1):
        j, k = ks
        return falling_factorial(m, 2) * fact({j: 1, k: 1}) + falling_factorial(m, 3) * fact({j: 2, k: 1})
    if shape == (3,):
        j = ks[0]
        return (m * fact({j: 1}) + 3 * falling_factorial(m, 2) * fact({j: 2})
                + falling_factorial(m, 3) * fact({j: 3}))
    raise ValueError(f"unsupported moment pattern {v}")


def multinomial_moment(f: Sequence, m: int, v: Iterable[int]):
    """Limit moment ``E prod_{k in v} Y_k`` of ``Y ~ Mult(f, m)``.

    Uses the closed forms ``E Y_j Y_k = (m)_2 f_j f_k``,
    ``E Y_j^2 = m f_j + (m)_2 f_j^2``, ``E Y_j^2 Y_k = (m)_2 f_j f_k + (m)_3 f_j^2 f_k``,
    ``E Y_j^3 = m f_j + 3 (m)_2 f_j^2 + (m)_3 f_j^3`` and so on. Exact when
    ``f`` holds Fractions.
    """
    v = _check_v(v, len(f))

    def fact(b):
        out = 1
        for k, e in b.items():
            out = out * f[k] ** e
        return out

    return _moment_from_factorial(v, m, fact)


def hypergeom_moment_formula(n_vec: Sequence[int], m: int, v: Iterable[int]) -> Fraction:
    """Finite-population version of :func:`multinomial_moment`.

    Products ``f_j^a f_k^b`` become ``(n_j)_a (n_k)_b / (N)_{a+b}``, which is
    exact for the hypergeometric law.
    """
    n_vec = [int(x) for x in n_vec]
    N = sum(n_vec)
    v = _check_v(v, len(n_vec))
    if m > N:
        raise ValueError("m exceeds the population size")

    def fact(b):
        num = 1
        for k, e in b.items():
            num *= falling_factorial(n_vec[k], e)
        den = falling_factorial(N, sum(b.values()))
        return Fraction(num, den) if den else Fraction(0)

    return Fraction(_moment_from_factorial(v, m, fact))


def multinomial_expect(f: Sequence[float], m: int, g: Callable[[np.ndarray], float]) -> float:
    """``sum_{|x| = m} g(x) Mult(x; f, m)`` by enumerating compositions."""
    if m > MAX_MULTINOMIAL_M:
        raise ValueError(f"m={m} exceeds the enumeration guard {MAX_MULTINOMIAL_M}")
    f = np.asarray(f, dtype=float)
    total = 0.0
    for x in compositions(m, len(f)):
        pmf = _multinomial_coef(x) * float(np.prod(f ** np.asarray(x)))
        if pmf:
            total += g(np.asarray(x)) * pmf
    return total


def _multinomial_table(f: np.ndarray, m: int):
    """Support and probabilities of ``Mult(f, m)``."""
    if m > MAX_MULTINOMIAL_M:
        raise ValueError(f"m={m} exceeds the enumeration guard {MAX_MULTINOMIAL_M}")
    X = _composition_array(m, len(f))
    coef = np.array([_multinomial_coef(x) for x in X], dtype=float)
    with np.errstate(invalid="ignore"):
        pmf = coef * np.prod(np.where(X > 0, f[None, :] ** X, 1.0), axis=1)
    return X, pmf


# --------------------------------------------------------------------------
# limiting law of the share vector


def _design_m(design: DesignSpec, pop: PopulationModel) -> np.ndarray:
    if design.kind == "srs":
        return np.array([design.m])
    if design.kind in ("matching", "counter_matching"):
        return design.m_for(pop.strata)
    return np.array([1])


def share_law(design: DesignSpec, pop: PopulationModel, seg: int) -> tuple[np.ndarray, np.ndarray]:
    """Limiting law of the share vector on segment ``seg``.

    Returns
    -------
    prob : ndarray, shape (N,)
    shares : ndarray, shape (N, K)
    """
    q, fkl = pop.q[seg], pop.f_kl[seg]
    f = q @ fkl
    if design.kind == "full":
        return np.ones(1), f[None, :]
    if design.kind == "srs":
        X, pmf = _multinomial_table(f, design.m)
        return pmf, X / design.m
    ms = _design_m(design, pop)
    if design.kind == "matching":
        probs, shares = [], []
        for l in range(pop.n_strata):
            if q[l] == 0:
                continue
            X, pmf = _multinomial_table(fkl[l], int(ms[l]))
            probs.append(q[l] * pmf)
            shares.append(X / ms[l])
        return np.concatenate(probs), np.vstack(shares)
    tables = [_multinomial_table(fkl[l], int(ms[l])) for l in range(pop.n_strata)]
    probs, shares = [], []
    for combo in itertools.product(*(range(len(t[1])) for t in tables)):
        pr = 1.0
        s = np.zeros(len(f))
        for l, i in enumerate(combo):
            X, pmf = tables[l]
            pr *= pmf[i]
            s = s + X[i] * q[l] / ms[l]
        probs.append(pr)
        shares.append(s)
    return np.array(probs), np.array(shares)


def h_law(design: DesignSpec, pop: PopulationModel, v: Iterable[int]) -> np.ndarray:
    """``h_v`` per segment computed directly from the share law."""
    v = tuple(v)
    out = np.empty(pop.segments)
    for s in range(pop.segments):
        prob, S = share_law(design, pop, s)
        out[s] = pop.p[s] * np.sum(prob * np.prod(S[:, list(v)], axis=1)) if v else pop.p[s]
    return out


# --------------------------------------------------------------------------
# closed-form h functions


def _h_cm_segment(q, fkl, ms, v) -> float:
    """Counter-matching ``h_v / p`` on one segment."""
    f = q @ fkl
    L = len(q)
    pat = _pattern(v)
    shape = tuple(c for _, c in pat)
    off = [(a, b) for a in range(L) for b in range(L) if a != b]
    if shape == (1, 1):
        k1, k2 = (k for k, _ in pat)
        return float(f[k1] * f[k2] - np.sum(fkl[:, k1] * fkl[:, k2] * q ** 2 / ms))
    if shape == (2, 1):
        k1, k3 = (k for k, _ in pat)
        a, b = fkl[:, k1], fkl[:, k3]
        diag = np.sum(a * b * (ms * (1 - 3 * a) - (1 - 2 * a)) * q ** 3 / ms ** 2)
        cross = sum(a[l1] * (b[l2] * (1 - a[l1]) - 2 * b[l1] * a[l2]) * q[l1] ** 2 * q[l2] / ms[l1]
                    for l1, l2 in off)
        return float(f[k1] ** 2 * f[k3] + diag + cross)
    if shape == (1, 1, 1):
        k1, k2, k3 = sorted(k for k, _ in pat)
        x, y, z = fkl[:, k1], fkl[:, k2], fkl[:, k3]
        t2 = np.sum((2 - 3 * ms) / ms ** 2 * x * y * z * q ** 3)
        t3 = sum(x[l1] * y[l1] * z[l3] * q[l1] ** 2 * q[l3] / ms[l1] for l1, l3 in off)
        t4 = sum(z[l1] * (x[l1] * y[l2] + x[l2] * y[l1]) * q[l1] ** 2 * q[l2] / ms[l1] for l1, l2 in off)
        return float(f[k1] * f[k2] * f[k3] + t2 - t3 - t4)
    return _h_cm_expansion(q, fkl, ms, v)


def _h_cm_expansion(q, fkl, ms, v) -> float:
    """``E prod_{k in v} sum_l Y_{k,l} q_l / m_l`` by expanding over stratum assignments."""
    total = 0.0
    for ls in itertools.product(range(len(q)), repeat=len(v)):
        coef = 1.0
        per: dict[int, list[int]] = {}
        for k, l in zip(v, ls):
            coef *= q[l] / ms[l]
            per.setdefault(l, []).append(k)
        for l, ks in per.items():
            coef *= multinomial_moment(fkl[l], int(ms[l]), ks)
        total += coef
    return total


def h_limit(design: DesignSpec, pop: PopulationModel, v: Iterable[int]) -> np.ndarray:
    """Closed-form ``h_v`` per segment for ``|v|`` of 2 or 3.

    Full cohort: ``p prod f_k``. Simple random sampling:
    ``p m^-|v| E prod Y_k``. Matching:
    ``p sum_l q_l m_l^-|v| E prod Y_{k,l}``. Counter-matching: the
    diagonal/off-diagonal stratum expansions, e.g.
    ``h_jk = p (f_j f_k - sum_l f_{j,l} f_{k,l} q_l^2 / m_l)``.
    """
    v = tuple(int(k) for k in v)
    if len(v) not in (2, 3):
        raise ValueError("h_v is defined for |v| in {2, 3}")
    K = len(pop.alphas)
    if any(k < 0 or k >= K for k in v):
        raise ValueError("level index outside the level set")
    out = np.empty(pop.segments)
    f_all = pop.f
    if design.kind in ("matching", "counter_matching") and pop.n_strata < 1:
        raise DesignError(f"{design.kind} needs stratum frequencies")
    ms = _design_m(design, pop).astype(float)
    for s in range(pop.segments):
        q, fkl, f = pop.q[s], pop.f_kl[s], f_all[s]
        if design.kind == "full":
            val = float(np.prod(f[list(v)]))
        elif design.kind == "srs":
            val = multinomial_moment(f, design.m, v) / design.m ** len(v)
        elif design.kind == "matching":
            val = sum(q[l] * multinomial_moment(fkl[l], int(ms[l]), v) / ms[l] ** len(v)
                      for l in range(pop.n_strata))
        else:
            val = _h_cm_segment(q, fkl, ms, v)
        out[s] = pop.p[s] * val
    return out


def h_cm_classical(pop: PopulationModel, m_per_stratum) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary-exposure counter-matching ``(h_01, h_011, h_100)`` per segment."""
    ms = np.asarray(m_per_stratum, dtype=float)
    h01 = np.empty(pop.segments)
    h011 = np.empty(pop.segments)
    h100 = np.empty(pop.segments)
    for s in range(pop.segments):
        q, fkl = pop.q[s], pop.f_kl[s]
        f0, f1 = q @ fkl
        g0, g1 = fkl[:, 0], fkl[:, 1]
        A = np.sum(g0 * g1 * q ** 2 / ms)
        h01[s] = f0 * f1 - A
        h011[s] = f0 * f1 ** 2 + A * np.sum((1 - 3 * g1) * q) - np.sum(g0 * g1 * (1 - 2 * g1) * q ** 3 / ms ** 2)
        h100[s] = f1 * f0 ** 2 + A * np.sum((1 - 3 * g0) * q) - np.sum(g0 * g1 * (1 - 2 * g0) * q ** 3 / ms ** 2)
    return pop.p * h01, pop.p * h011, pop.p * h100


# --------------------------------------------------------------------------
# variances


def integrals(design: DesignSpec, pop: PopulationModel, hazard=None) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric arrays ``I_jk`` and ``I_jkq`` over ``[0, tau]``.

    Only entries whose index multiset contains two distinct levels are
    filled; the others are never needed.
    """
    K = len(pop.alphas)
    I2 = np.zeros((K, K))
    I3 = np.zeros((K, K, K))
    for j, k in pairs(K):
        I2[j, k] = I2[k, j] = pop.integrate(h_limit(design, pop, (j, k)), hazard)
    for v in itertools.combinations_with_replacement(range(K), 3):
        if len(set(v)) < 2:
            continue
        val = pop.integrate(h_limit(design, pop, v), hazard)
        for perm in set(itertools.permutations(v)):
            I3[perm] = val
    return I2, I3


def sigma2_mh(design: DesignSpec, pop: PopulationModel, phi0: float, c=None) -> float:
    """Asymptotic variance of ``sqrt(n)(phi_hat - phi0)``.

    Built from ``beta_jk = (a_k - a_j) phi0^(a_j + a_k - 1) I_jk`` and the pair
    covariances of the limiting Gaussian process; in the binary case this is
    ``(phi0^2 I_011 + phi0 I_100) / I_01^2``.
    """
    if not phi0 > 0:
        raise ValueError("phi0 must be positive")
    I2, I3 = integrals(design, pop)
    beta, G = beta_gamma(pop.alphas, I2, I3, phi0)
    c = np.ones(len(beta)) if c is None else np.asarray(c, dtype=float)
    if np.all(beta == 0):
        raise DegenerateEstimateError("population carries no information")
    return sigma2_from(beta, G, c)


def sigma2_mh_classical(h01, h011, h100, pop: PopulationModel, phi0: float, hazard=None) -> float:
    """``int (phi0^2 h_011 + phi0 h_100) lambda0 / (int h_01 lambda0)^2``."""
    den = pop.integrate(h01, hazard)
    if den == 0:
        raise DegenerateEstimateError("population carries no information")
    return pop.integrate(phi0 ** 2 * np.asarray(h011) + phi0 * np.asarray(h100), hazard) / den ** 2


def sigma2_closed_form(design: DesignSpec, pop: PopulationModel, phi0: float) -> float:
    """Design-specific binary-exposure variance formulas.

    Full cohort: ``int (phi0^2 f_1 + phi0 f_0) h_01 lambda0 / (int h_01 lambda0)^2``.
    Simple random sampling:
    ``phi0 int p f_0 f_1 [(1 + phi0) + (f_0 + phi0 f_1)(m - 2)] lambda0 / ((m - 1)(int p f_0 f_1 lambda0)^2)``.
    Matching: the stratum-weighted analogue. Counter-matching: the
    classical h functions, or at ``phi0 = 1`` the reciprocal of
    ``int p (f_0 f_1 - sum_l f_{0,l} f_{1,l} q_l^2 / m_l) lambda0``.
    """
    if len(pop.alphas) != 2 or pop.alphas[1] != 1.0:
        raise ValueError("closed forms cover the binary exposure only")
    f0, f1 = pop.f[:, 0], pop.f[:, 1]
    p = pop.p
    if design.kind == "full":
        h01 = p * f0 * f1
        return pop.integrate((phi0 ** 2 * f1 + phi0 * f0) * h01) / pop.integrate(h01) ** 2
    if design.kind == "srs":
        m = design.m
        base = p * f0 * f1
        num = phi0 * pop.integrate(base * ((1 + phi0) + (f0 + phi0 * f1) * (m - 2)))
        return num / ((m - 1) * pop.integrate(base) ** 2)
    ms = _design_m(design, pop).astype(float)
    g0, g1, q = pop.f_kl[:, :, 0], pop.f_kl[:, :, 1], pop.q
    if design.kind == "matching":
        num_t = p * np.sum((ms - 1) / ms ** 2 * q * g0 * g1 * ((1 + phi0) + (g0 + phi0 * g1) * (ms - 2)), axis=1)
        den_t = p * np.sum((ms - 1) / ms * q * g0 * g1, axis=1)
        return phi0 * pop.integrate(num_t) / pop.integrate(den_t) ** 2
    if phi0 == 1.0:
        inner = f0 * f1 - np.sum(g0 * g1 * q ** 2 / ms, axis=1)
        return 1.0 / pop.integrate(p * inner)
    h01, h011, h100 = h_cm_classical(pop, ms)
    return sigma2_mh_classical(h01, h011, h100, pop, phi0)


def sigma2_mh_stratified(pop: PopulationModel, m_per_stratum, phi0: float) -> float:
    """Binary matching with a separate baseline ``lambda_l`` per stratum.

    ``sum_l int (phi0^2 h_011,l + phi0 h_100,l) lambda_l / (sum_l int h_01,l lambda_l)^2``.
    """
    ms = np.asarray(m_per_stratum, dtype=float)
    lam = pop.lambda_strata if pop.lambda_strata is not None else np.repeat(pop.lambda0[:, None], pop.n_strata, 1)
    num = den = 0.0
    for l in range(pop.n_strata):
        g = pop.f_kl[:, l, :]
        m = int(ms[l])
        scale = pop.p * pop.q[:, l]
        h01 = scale * np.array([multinomial_moment(gi, m, (0, 1)) for gi in g]) / m ** 2
        h011 = scale * np.array([multinomial_moment(gi, m, (0, 1, 1)) for gi in g]) / m ** 3
        h100 = scale * np.array([multinomial_moment(gi, m, (1, 0, 0)) for gi in g]) / m ** 3
        num += pop.integrate(phi0 ** 2 * h011 + phi0 * h100, lam[:, l])
        den += pop.integrate(h01, lam[:, l])
    if den == 0:
        raise DegenerateEstimateError("population carries no information")
    return num / den ** 2


def e_psi(design: DesignSpec, pop: PopulationModel, phi0: float) -> tuple[np.ndarray, np.ndarray]:
    """Limits ``e(phi0, t)`` and ``psi(phi0, t)`` per segment.

    ``e = E[S1(s) / S0(s)]`` and ``psi = E[1 / S0(s)] / p`` over the share
    law, with ``S0 = sum phi0^a_k s_k`` and ``S1 = sum a_k phi0^(a_k - 1) s_k``.
    """
    a = np.asarray(pop.alphas, dtype=float)
    e = np.empty(pop.segments)
    psi = np.empty(pop.segments)
    for s in range(pop.segments):
        prob, S = share_law(design, pop, s)
        S0 = S @ phi0 ** a
        S1 = S @ (a * phi0 ** (a - 1))
        keep = prob > 0
        e[s] = np.sum(prob[keep] * S1[keep] / S0[keep])
        psi[s] = np.sum(prob[keep] / S0[keep]) / pop.p[s] if pop.p[s] > 0 else np.inf
    return e, psi


def baseline_limits(design: DesignSpec, pop: PopulationModel, phi0: float, t) -> tuple:
    """``B(t) = int_0^t e lambda0`` and ``omega^2(t) = int_0^t psi lambda0``."""
    e, psi = e_psi(design, pop, phi0)
    return pop.cumulative(e, t), pop.cumulative(psi, t)


def mple_information(design: DesignSpec, pop: PopulationModel, phi0: float) -> float:
    """Partial-likelihood information for ``theta = log phi`` per subject.

    ``int p E[S0 (S2 / S0 - (S1 / S0)^2)] lambda0`` over the share law with
    ``S_r = sum a_k^r phi0^a_k s_k``.
    """
    if len(pop.alphas) != 2:
        raise DesignError("partial-likelihood comparison is implemented for a binary exposure")
    a = np.asarray(pop.alphas, dtype=float)
    dens = np.empty(pop.segments)
    for s in range(pop.segments):
        prob, S = share_law(design, pop, s)
        w = S * phi0 ** a
        S0 = w.sum(axis=1)
        S1 = w @ a
        S2 = w @ a ** 2
        keep = (prob > 0) & (S0 > 0)
        dens[s] = pop.p[s] * np.sum(prob[keep] * (S2[keep] - S1[keep] ** 2 / S0[keep]))
    return pop.integrate(dens)


def mple_variance(design: DesignSpec, pop: PopulationModel, phi0: float) -> tuple[float, float]:
    """Asymptotic partial-likelihood variance as ``(theta scale, phi scale)``."""
    info = mple_information(design, pop, phi0)
    if info <= 0:
        raise DegenerateEstimateError("population carries no information")
    return 1.0 / info, phi0 ** 2 / info


ARE_COLUMNS = ("log_phi", "sigma2_mh_theta", "sigma2_mple_theta", "are")


def are_curve(design: DesignSpec, pop: PopulationModel, log_phi_grid) -> np.ndarray:
    """Efficiency of the Mantel-Haenszel estimator relative to partial likelihood.

    Returns rows ``(log phi, sigma2_MH_theta, sigma2_MPLE_theta, ARE)`` with
    ``ARE = sigma2_MPLE_theta / sigma2_MH_theta``.
    """
    rows = []
    for theta in np.asarray(log_phi_grid, dtype=float):
        phi = math.exp(theta)
        s_mh = sigma2_mh(design, pop, phi) / phi ** 2
        s_pl = mple_variance(design, pop, phi)[0]
        rows.append((theta, s_mh, s_pl, s_pl / s_mh))
    return np.array(rows).reshape(-1, 4)


def parse_grid(spec: str) -> np.ndarray:
    """``"lo:hi:step"`` to an inclusive grid, rounded to suppress drift."""
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ValueError(f"grid must look like lo:hi:step, got {spec!r}") from None
    if step <= 0 or hi < lo:
        raise ValueError("grid needs lo <= hi and a positive step")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 12)


def write_are_csv(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ARE_COLUMNS)
        for row in table:
            w.writerow([repr(float(x)) for x in row])


def render_are_svg(curves: dict, path, width: int = 480, height: int = 360,
                   y_range: tuple[float, float] | None = None) -> None:
    """Write one polyline per labelled ARE table, with annotated axes."""
    margin = 50
    xs = np.concatenate([t[:, 0] for t in curves.values()])
    ys = np.concatenate([t[:, 3] for t in curves.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x1 = x0 + 1
    if y_range is None:
        y0, y1 = min(0.8, float(ys.min())), max(1.0, float(ys.max()))
    else:
        y0, y1 = y_range
    pw, ph = width - 2 * margin, height - 2 * margin

    def px(x):
        return margin + (x - x0) / (x1 - x0) * pw

    def py(y):
        return height - margin - (y - y0) / (y1 - y0) * ph

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>']
    for x in np.linspace(x0, x1, 7):
        out.append(f'<text x="{px(x):.1f}" y="{height - margin + 16}" font-size="11" '
                   f'text-anchor="middle">{x:.1f}</text>')
    for y in np.linspace(y0, y1, 5):
        out.append(f'<text x="{margin - 6}" y="{py(y) + 4:.1f}" font-size="11" text-anchor="end">{y:.2f}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 10}" font-size="12" text-anchor="middle">log rate ratio</text>')
    out.append(f'<text x="14" y="{height / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">asymptotic relative efficiency</text>')
    for i, (label, table) in enumerate(curves.items()):
        color = palette[i % len(palette)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(table[:, 0], table[:, 3]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i}" font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
