"""Risk-set sampling designs: full cohort, simple random, matching, counter-matching.

Every design picks a sampled risk set ``r`` containing the case and attaches
weights ``w_i(t, r)`` with ``pi_t(r|i) = pi_t(r) w_i(t, r)``. For all four
designs the weights of a sampled set sum to ``n(t)``, which is what lets the
estimator work with per-failure level shares only.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import Cohort, RiskSet, failure_risk_set
from .errors import CohortError, DeficientStratumError, DesignError

KINDS = ("full", "srs", "matching", "counter_matching")

# stream purposes for keyed random generators
SIMULATE, SAMPLE = 0, 1


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for stream ``key`` under the global ``seed``.

    Streams with distinct keys are independent, so results never depend on
    the order in which replicates or failures are processed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DesignSpec:
    """A sampling design.

    Parameters
    ----------
    kind : {"full", "srs", "matching", "counter_matching"}
    m : int, optional
        Sampled-set size for ``srs``.
    m_per_stratum : mapping or sequence, optional
        Sizes ``m_l`` for ``matching`` and ``counter_matching``; a sequence is
        read in the order of the cohort's stratum labels.
    clamp : bool
        Take a whole stratum (or risk set) when it is smaller than requested
        instead of raising. This lies outside the design assumptions of the
        asymptotic theory.
    """

    kind: str = "full"
    m: int | None = None
    m_per_stratum: tuple | Mapping | None = None
    clamp: bool = False

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        if kind in ("full_cohort", "cohort"):
            kind = "full"
        if kind == "counter-matching" or kind == "cm":
            kind = "counter_matching"
        if kind not in KINDS:
            raise DesignError(f"unknown design kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "srs":
            if self.m is None or int(self.m) < 2:
                raise DesignError("srs needs m >= 2")
            object.__setattr__(self, "m", int(self.m))
        if kind in ("matching", "counter_matching"):
            mps = self.m_per_stratum
            if mps is None:
                raise DesignError(f"{kind} needs m_per_stratum")
            if isinstance(mps, Mapping):
                mps = tuple(sorted((str(k), int(v)) for k, v in mps.items()))
                values = [v for _, v in mps]
            else:
                mps = tuple(int(v) for v in mps)
                values = list(mps)
            if not values or min(values) < 1:
                raise DesignError("every m_l must be >= 1")
            object.__setattr__(self, "m_per_stratum", mps)

    def m_for(self, strata: Sequence[str]) -> np.ndarray:
        """Per-stratum sizes aligned with ``strata``."""
        mps = self.m_per_stratum
        if mps and isinstance(mps[0], tuple):
            lookup = dict(mps)
            try:
                return np.array([lookup[str(s)] for s in strata], dtype=np.int64)
            except KeyError as exc:
                raise DesignError(f"no m_l given for stratum {exc.args[0]!r}") from None
        if len(mps) != len(strata):
            raise DesignError(f"{len(mps)} stratum sizes for {len(strata)} strata")
        return np.asarray(mps, dtype=np.int64)

    def describe(self) -> dict:
        out = {"kind": self.kind, "clamp": self.clamp}
        if self.m is not None:
            out["m"] = self.m
        if self.m_per_stratum is not None:
            mps = self.m_per_stratum
            out["m_per_stratum"] = dict(mps) if mps and isinstance(mps[0], tuple) else list(mps)
        return out


@dataclass(frozen=True, eq=False)
class SampledFailure:
    """A failure with its sampled risk set; the case is always member 0."""

    time: float
    case_id: object
    case_level_index: int
    n_t: int
    member_ids: tuple
    levels: np.ndarray
    strata: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        if self.member_ids[0] != self.case_id:
            raise DesignError("the case must be the first member")
        if np.any(self.weights <= 0):
            raise DesignError("weights must be positive")

    @property
    def case_stratum(self) -> str:
        return self.strata[0]

    def shares(self, n_levels: int) -> np.ndarray:
        """Level shares ``s_k = n(t)^-1 sum_{i in r, Z_i = k} w_i``."""
        s = np.bincount(self.levels, weights=self.weights, minlength=n_levels)
        return s / self.n_t

    def __eq__(self, other):
        if not isinstance(other, SampledFailure):
            return NotImplemented
        return (
            self.time == other.time
            and self.case_id == other.case_id
            and self.case_level_index == other.case_level_index
            and self.n_t == other.n_t
            and self.member_ids == other.member_ids
            and np.array_equal(self.levels, other.levels)
            and self.strata == other.strata
            and np.array_equal(self.weights, other.weights)
        )


def _build(rs: RiskSet, case_pos: int, picks: Sequence[int], weights) -> SampledFailure:
    idx = [case_pos] + [int(p) for p in picks]
    return SampledFailure(
        time=rs.time,
        case_id=rs.members[case_pos],
        case_level_index=int(rs.levels[case_pos]),
        n_t=rs.n_t,
        member_ids=tuple(rs.members[i] for i in idx),
        levels=rs.levels[idx].copy(),
        strata=tuple(rs.stratum_labels[rs.strata[i]] for i in idx),
        weights=np.asarray(weights, dtype=float),
    )


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return pool[:0]
    return np.sort(rng.choice(pool, size=k, replace=False))


def sample_full(risk_set: RiskSet, case_id) -> SampledFailure:
    """The whole risk set with unit weights."""
    c = risk_set.position_of(case_id)
    others = [i for i in range(risk_set.n_t) if i != c]
    return _build(risk_set, c, others, np.ones(risk_set.n_t))


def sample_srs(risk_set: RiskSet, case_id, m: int, rng: np.random.Generator,
               clamp: bool = False) -> SampledFailure:
    """Case plus ``m - 1`` controls drawn uniformly without replacement."""
    if m < 2:
        raise DesignError("srs needs m >= 2")
    n = risk_set.n_t
    c = risk_set.position_of(case_id)
    if n < m:
        if not clamp:
            raise DeficientStratumError(f"risk set of size {n} at t={risk_set.time} smaller than m={m}")
        m = n
    pool = np.array([i for i in range(n) if i != c], dtype=np.int64)
    picks = _draw(rng, pool, m - 1)
    return _build(risk_set, c, picks, np.full(m, n / m))


def sample_matching(risk_set: RiskSet, case_id, m_per_stratum, rng: np.random.Generator,
                    clamp: bool = False) -> SampledFailure:
    """Case plus ``m_l - 1`` controls from the case's own stratum ``l``."""
    c = risk_set.position_of(case_id)
    ms = np.asarray(m_per_stratum, dtype=np.int64)
    l = int(risk_set.strata[c])
    m, size = int(ms[l]), int(risk_set.stratum_counts[l])
    if size < m:
        if not clamp:
            raise DeficientStratumError(
                f"stratum {risk_set.stratum_labels[l]!r} has {size} at risk at t={risk_set.time}, needs {m}")
        m = size
    pool = np.flatnonzero(risk_set.strata == l)
    pool = pool[pool != c]
    picks = _draw(rng, pool, m - 1)
    return _build(risk_set, c, picks, np.full(m, risk_set.n_t / m))


def sample_counter_matching(risk_set: RiskSet, case_id, m_per_stratum, rng: np.random.Generator,
                            clamp: bool = False) -> SampledFailure:
    """``m_l`` members from every stratum ``l``, the case counting toward its own."""
    c = risk_set.position_of(case_id)
    ms = np.asarray(m_per_stratum, dtype=np.int64)
    counts = risk_set.stratum_counts
    lc = int(risk_set.strata[c])
    eff = ms.copy()
    short = counts < ms
    if np.any(short):
        if not clamp:
            l = int(np.flatnonzero(short)[0])
            raise DeficientStratumError(
                f"stratum {risk_set.stratum_labels[l]!r} has {counts[l]} at risk at t={risk_set.time}, needs {ms[l]}")
        eff = np.minimum(ms, counts)
    picks = []
    weight_of = np.where(eff > 0, counts / np.maximum(eff, 1), 0.0)
    for l in range(len(ms)):
        pool = np.flatnonzero(risk_set.strata == l)
        if l == lc:
            pool = pool[pool != c]
            picks.extend(_draw(rng, pool, int(eff[l]) - 1))
        else:
            picks.extend(_draw(rng, pool, int(eff[l])))
    weights = [weight_of[lc]] + [weight_of[risk_set.strata[p]] for p in picks]
    return _build(risk_set, c, picks, weights)


def sample_failure(risk_set: RiskSet, case_id, design: DesignSpec,
                   rng: np.random.Generator | None = None) -> SampledFailure:
    """Dispatch one failure to the sampler for ``design``."""
    if design.kind == "full":
        return sample_full(risk_set, case_id)
    if rng is None:
        raise DesignError(f"design {design.kind!r} needs a random generator")
    if design.kind == "srs":
        return sample_srs(risk_set, case_id, design.m, rng, design.clamp)
    ms = design.m_for(risk_set.stratum_labels)
    if design.kind == "matching":
        return sample_matching(risk_set, case_id, ms, rng, design.clamp)
    return sample_counter_matching(risk_set, case_id, ms, rng, design.clamp)


def sample_cohort(cohort: Cohort, design: DesignSpec, seed: int | None = None,
                  rep: int = 0) -> list[SampledFailure]:
    """Sample every failure of ``cohort``.

    Failure ``j`` draws from its own stream keyed by ``(seed, rep, j)``.
    """
    if design.kind != "full" and seed is None:
        raise DesignError("a seed is required for random designs")
    out = []
    for j, event in enumerate(cohort.failures):
        rs = failure_risk_set(cohort, j)
        rng = None if design.kind == "full" else keyed_rng(seed, SAMPLE, rep, j)
        out.append(sample_failure(rs, event.case_id, design, rng))
    return out


# --------------------------------------------------------------------------
# exact enumeration oracle


@dataclass(frozen=True)
class DesignRow:
    members: frozenset
    case: int
    pi_given_case: Fraction
    pi_set: Fraction
    weight: Fraction


@dataclass
class DesignTable:
    """All supported ``(r, i)`` pairs of a design on one risk set, in exact arithmetic."""

    n_t: int
    rows: list[DesignRow] = field(default_factory=list)

    def set_probabilities(self) -> dict:
        out = {}
        for row in self.rows:
            out[row.members] = row.pi_set
        return out

    def verify(self) -> dict[str, bool]:
        """Check the identities tying set probabilities and weights together."""
        identity = all(r.pi_given_case == r.pi_set * r.weight for r in self.rows)
        per_case: dict[int, Fraction] = {}
        for r in self.rows:
            per_case[r.case] = per_case.get(r.case, Fraction(0)) + r.pi_given_case
        case_sums = len(per_case) == self.n_t and all(v == 1 for v in per_case.values())
        total_set = sum(self.set_probabilities().values(), Fraction(0)) == 1
        total_pairs = sum((r.pi_given_case for r in self.rows), Fraction(0)) == self.n_t
        weight_sums: dict[frozenset, Fraction] = {}
        for r in self.rows:
            weight_sums[r.members] = weight_sums.get(r.members, Fraction(0)) + r.weight
        weights_total = all(v == self.n_t for v in weight_sums.values())
        return {
            "identity": identity,
            "case_sums_to_one": case_sums,
            "set_probabilities_sum_to_one": total_set,
            "pairs_sum_to_n": total_pairs,
            "weights_sum_to_n": weights_total,
        }


MAX_ENUMERATION = 12


def _candidate_sets(rs: RiskSet, design: DesignSpec):
    """Supported sets, each paired with a function giving ``pi_t(r|i)`` and ``w_i``."""
    n = rs.n_t
    everyone = range(n)
    if design.kind == "full":
        yield frozenset(everyone), lambda i: (Fraction(1), Fraction(1))
        return
    if design.kind == "srs":
        m = min(design.m, n) if design.clamp else design.m
        if n < m:
            raise DeficientStratumError(f"risk set of size {n} smaller than m={m}")
        p = Fraction(1, comb(n - 1, m - 1))
        w = Fraction(n, m)
        for r in itertools.combinations(everyone, m):
            yield frozenset(r), lambda i: (p, w)
        return
    ms = design.m_for(rs.stratum_labels)
    counts = [int(c) for c in rs.stratum_counts]
    eff = []
    for l, (m, c) in enumerate(zip(ms, counts)):
        if c < m and not design.clamp:
            if design.kind == "counter_matching" or c > 0:
                raise DeficientStratumError(f"stratum {rs.stratum_labels[l]!r}: {c} at risk, needs {m}")
        eff.append(min(int(m), c))
    groups = [[i for i in everyone if rs.strata[i] == l] for l in range(len(counts))]
    if design.kind == "matching":
        for l, g in enumerate(groups):
            if not g:
                continue
            m = eff[l]
            p = Fraction(1, comb(counts[l] - 1, m - 1))
            w = Fraction(n, m)
            for r in itertools.combinations(g, m):
                yield frozenset(r), lambda i, p=p, w=w: (p, w)
        return
    total = 1
    for c, m in zip(counts, eff):
        total *= comb(c, m)
    base = Fraction(1, total)
    wl = [Fraction(c, m) if m else Fraction(0) for c, m in zip(counts, eff)]
    for parts in itertools.product(*(itertools.combinations(g, m) for g, m in zip(groups, eff))):
        r = frozenset(itertools.chain.from_iterable(parts))
        yield r, lambda i: (base * wl[rs.strata[i]], wl[rs.strata[i]])


def enumerate_design(risk_set: RiskSet, design: DesignSpec) -> DesignTable:
    """Exhaustive table of ``(r, i, pi_t(r|i), pi_t(r), w_i(t, r))``.

    ``pi_t(r)`` is computed as ``n(t)^-1 sum_{i in r} pi_t(r|i)`` and the
    weights come from the design's own weight formula, so
    :meth:`DesignTable.verify` is a genuine check.
    """
    n = risk_set.n_t
    if n > MAX_ENUMERATION:
        raise DesignError(f"risk set of size {n} too large to enumerate (max {MAX_ENUMERATION})")
    table = DesignTable(n)
    if n == 0:
        return table
    for r, rule in _candidate_sets(risk_set, design):
        given = {i: rule(i) for i in sorted(r)}
        pi_set = sum((p for p, _ in given.values()), Fraction(0)) / n
        for i, (p, w) in given.items():
            table.rows.append(DesignRow(r, i, p, pi_set, w))
    return table


# --------------------------------------------------------------------------
# CSV


SAMPLED_COLUMNS = ("failure_time", "n_at_risk", "case_id", "member_id", "level_index", "stratum", "weight")


def write_sampled_csv(path, failures: Iterable[SampledFailure]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLED_COLUMNS)
        for f in failures:
            for mid, lev, strat, wt in zip(f.member_ids, f.levels, f.strata, f.weights):
                w.writerow([repr(float(f.time)), f.n_t, f.case_id, mid, int(lev), strat, repr(float(wt))])


def read_sampled_csv(path) -> list[SampledFailure]:
    """Read blocks of rows sharing ``(failure_time, case_id)``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLED_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise CohortError(f"sampled-failure file missing columns: {sorted(missing)}")
        blocks: list[list[dict]] = []
        for row in reader:
            key = (row["failure_time"], row["case_id"])
            if blocks and (blocks[-1][0]["failure_time"], blocks[-1][0]["case_id"]) == key:
                blocks[-1].append(row)
            else:
                blocks.append([row])
    out = []
    for rows in blocks:
        try:
            case_rows = [r for r in rows if r["member_id"] == r["case_id"]]
            if len(case_rows) != 1:
                raise CohortError(f"failure at {rows[0]['failure_time']}: case must appear exactly once")
            ordered = case_rows + [r for r in rows if r["member_id"] != r["case_id"]]
            n_t = int(rows[0]["n_at_risk"])
            if any(int(r["n_at_risk"]) != n_t for r in rows):
                raise CohortError("inconsistent n_at_risk within a failure block")
            out.append(SampledFailure(
                time=float(rows[0]["failure_time"]),
                case_id=rows[0]["case_id"],
                case_level_index=int(case_rows[0]["level_index"]),
                n_t=n_t,
                member_ids=tuple(r["member_id"] for r in ordered),
                levels=np.array([int(r["level_index"]) for r in ordered], dtype=np.int64),
                strata=tuple(r["stratum"] for r in ordered),
                weights=np.array([float(r["weight"]) for r in ordered]),
            ))
        except (ValueError, DesignError) as exc:
            if isinstance(exc, CohortError):
                raise
            raise CohortError(f"malformed sampled-failure row: {exc}") from None
    return out
