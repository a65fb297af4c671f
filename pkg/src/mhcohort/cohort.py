"""Cohorts with time-dependent exposure and strata, and their risk sets.

Time conventions
----------------
All sample paths are left continuous. A subject whose observation runs from
``start`` to ``end`` is at risk for ``start < t <= end``; a covariate change
recorded at time ``s`` takes effect strictly after ``s``. In particular a
subject failing at ``t`` belongs to the risk set at ``t``.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import CohortError, NotAtRiskError

EVENT_KINDS = ("enter", "exit", "fail", "cov", "stratum")
DEFAULT_STRATUM = "0"

# order of processing for records sharing a time: close, relabel, open
_EVENT_RANK = {"fail": 0, "exit": 0, "cov": 1, "stratum": 1, "enter": 2}


def id_sort_key(subject_id: Hashable):
    """Ascending subject-id order; integer-like ids sort numerically."""
    try:
        return (0, int(subject_id), "")
    except (TypeError, ValueError):
        return (1, 0, str(subject_id))


@dataclass(frozen=True)
class LevelSet:
    """Ordered exposure scores ``0 = alpha_0 < alpha_1 < ... < alpha_eta``.

    ``labels`` name the levels in event files; they default to the level
    indices ``"0", "1", ...``.
    """

    alphas: tuple[float, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if len(alphas) < 2:
            raise ValueError("need at least two exposure levels")
        if alphas[0] != 0.0:
            raise ValueError("alpha_0 must be 0")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("exposure scores must be strictly increasing")
        labels = self.labels
        if labels is None:
            labels = tuple(str(k) for k in range(len(alphas)))
        labels = tuple(str(lab) for lab in labels)
        if len(labels) != len(alphas) or len(set(labels)) != len(labels):
            raise ValueError("labels must be unique, one per level")
        object.__setattr__(self, "labels", labels)

    @property
    def eta(self) -> int:
        return len(self.alphas) - 1

    @property
    def size(self) -> int:
        return len(self.alphas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alphas, dtype=float)

    def index_of(self, label) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise CohortError(f"unknown level label {label!r}") from None

    @property
    def is_classical(self) -> bool:
        return self.alphas == (0.0, 1.0)


CLASSICAL = LevelSet((0.0, 1.0))


@dataclass(frozen=True)
class Subject:
    """One cohort member.

    ``covariate_path`` and ``stratum_path`` list ``(time, value)`` pairs; each
    value holds on the left-open interval following its time until the next
    change.
    """

    id: Hashable
    risk_intervals: tuple[tuple[float, float], ...]
    covariate_path: tuple[tuple[float, int], ...]
    stratum_path: tuple[tuple[float, str], ...]

    def is_at_risk(self, t: float) -> bool:
        return any(a < t <= b for a, b in self.risk_intervals)

    def level_at(self, t: float) -> int:
        return _path_value(self.covariate_path, t)

    def stratum_at(self, t: float) -> str:
        return _path_value(self.stratum_path, t)


def _path_value(path, t):
    value = path[0][1]
    for s, v in path:
        if s < t:
            value = v
        else:
            break
    return value


@dataclass(frozen=True)
class FailureEvent:
    time: float
    case_id: Hashable
    case_level_index: int


class EventRecord(NamedTuple):
    subject_id: str
    time: float
    event: str
    value: str = ""


@dataclass(frozen=True)
class RiskSet:
    """Snapshot of those at risk at ``time``.

    ``positions`` index into ``Cohort.subjects``; members are listed in
    ascending subject order.
    """

    time: float
    members: tuple
    positions: np.ndarray
    levels: np.ndarray
    strata: np.ndarray
    level_counts: np.ndarray
    stratum_counts: np.ndarray
    cross_counts: np.ndarray
    stratum_labels: tuple[str, ...]

    @property
    def n_t(self) -> int:
        return len(self.positions)

    def position_of(self, subject_id) -> int:
        try:
            return self.members.index(subject_id)
        except ValueError:
            raise NotAtRiskError(f"subject {subject_id!r} not in risk set at t={self.time}") from None

    def without(self, drop: Iterable[int]) -> RiskSet:
        """Copy with the members at the given positions-in-set removed."""
        keep = np.ones(self.n_t, dtype=bool)
        keep[list(drop)] = False
        return _make_risk_set(
            self.time,
            tuple(m for m, k in zip(self.members, keep) if k),
            self.positions[keep],
            self.levels[keep],
            self.strata[keep],
            len(self.level_counts),
            self.stratum_labels,
        )


def _make_risk_set(time, members, positions, levels, strata, n_levels, stratum_labels):
    n_strata = len(stratum_labels)
    cross = np.zeros((n_levels, n_strata), dtype=np.int64)
    np.add.at(cross, (levels, strata), 1)
    return RiskSet(
        time=time,
        members=members,
        positions=positions,
        levels=levels,
        strata=strata,
        level_counts=cross.sum(axis=1),
        stratum_counts=cross.sum(axis=0),
        cross_counts=cross,
        stratum_labels=stratum_labels,
    )


@dataclass(frozen=True, eq=False)
class Cohort:
    """Validated cohort followed over ``(0, tau]``.

    Besides the subject list the cohort keeps a flat table of constant
    segments ``(subject, start, end, level, stratum)`` so that risk sets are
    computed by one vectorised comparison.
    """

    subjects: tuple[Subject, ...]
    tau: float
    levels: LevelSet
    strata: tuple[str, ...]
    failures: tuple[FailureEvent, ...] = ()
    _seg: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> tuple:
        return self._seg["ids"]

    def position_of(self, subject_id) -> int:
        try:
            return self._seg["index"][subject_id]
        except KeyError:
            raise CohortError(f"unknown subject {subject_id!r}") from None

    @classmethod
    def from_subjects(cls, subjects, tau, levels, strata=None, failures=()):
        subjects = tuple(sorted(subjects, key=lambda s: id_sort_key(s.id)))
        ids = tuple(s.id for s in subjects)
        if len(set(ids)) != len(ids):
            raise CohortError("subject ids must be unique")
        if not tau > 0:
            raise CohortError("tau must be positive")
        if strata is None:
            found = {v for s in subjects for _, v in s.stratum_path}
            strata = tuple(sorted(found or {DEFAULT_STRATUM}, key=id_sort_key))
        strata = tuple(str(s) for s in strata)
        stratum_index = {lab: i for i, lab in enumerate(strata)}

        sub, start, end, lev, strat = [], [], [], [], []
        for pos, s in enumerate(subjects):
            for a, b in s.risk_intervals:
                if a < 0 or b > tau:
                    raise CohortError(f"subject {s.id!r}: interval ({a}, {b}] outside [0, tau]")
                cuts = sorted({a, b} | {c for c, _ in s.covariate_path if a < c < b}
                              | {c for c, _ in s.stratum_path if a < c < b})
                for lo, hi in zip(cuts, cuts[1:]):
                    sub.append(pos)
                    start.append(lo)
                    end.append(hi)
                    lev.append(s.level_at(hi))
                    label = s.stratum_at(hi)
                    if label not in stratum_index:
                        raise CohortError(f"subject {s.id!r}: unknown stratum {label!r}")
                    strat.append(stratum_index[label])
        seg = {
            "ids": ids,
            "index": {sid: i for i, sid in enumerate(ids)},
            "sub": np.asarray(sub, dtype=np.int64),
            "start": np.asarray(start, dtype=float),
            "end": np.asarray(end, dtype=float),
            "level": np.asarray(lev, dtype=np.int64),
            "stratum": np.asarray(strat, dtype=np.int64),
        }
        if np.any(seg["level"] >= levels.size) or np.any(seg["level"] < 0):
            raise CohortError("level index outside the level set")
        failures = tuple(sorted(failures, key=lambda f: (f.time, id_sort_key(f.case_id))))
        cohort = cls(subjects, float(tau), levels, strata, failures, seg)
        for f in failures:
            if not 0 < f.time <= tau:
                raise CohortError(f"failure time {f.time} outside (0, tau]")
            s = subjects[cohort.position_of(f.case_id)]
            if not s.is_at_risk(f.time):
                raise CohortError(f"subject {f.case_id!r} fails at {f.time} while not at risk")
        return cohort


def build_cohort(records: Iterable, levels: LevelSet = CLASSICAL, tau: float | None = None,
                 strata: Sequence[str] | None = None) -> Cohort:
    """Assemble a cohort from event records.

    Parameters
    ----------
    records : iterable of EventRecord or 4-tuples
        ``(subject_id, time, event, value)`` with ``event`` one of
        ``enter, exit, fail, cov, stratum``. ``value`` carries the level label
        for ``cov`` and the stratum label for ``stratum``.
    levels : LevelSet
    tau : float, optional
        End of follow-up. Defaults to the largest recorded time. Subjects
        still at risk after their last record are censored at ``tau``.
    strata : sequence of str, optional
        Admissible stratum labels; defaults to those appearing in the data.

    Returns
    -------
    Cohort
        With ``failures`` holding the ordered failure events.
    """
    by_subject: dict[str, list] = defaultdict(list)
    max_time = 0.0
    for order, rec in enumerate(records):
        rec = EventRecord(*rec)
        if rec.event not in EVENT_KINDS:
            raise CohortError(f"unknown event kind {rec.event!r}")
        t = float(rec.time)
        if not np.isfinite(t) or t < 0:
            raise CohortError(f"invalid time {rec.time!r}")
        max_time = max(max_time, t)
        by_subject[rec.subject_id].append((t, _EVENT_RANK[rec.event], order, rec))
    if tau is None:
        tau = max_time
    tau = float(tau)
    if max_time > tau:
        raise CohortError(f"record at time {max_time} beyond tau={tau}")

    subjects, failures = [], []
    for sid, recs in by_subject.items():
        recs.sort(key=lambda r: r[:3])
        intervals, cov_path, strat_path = [], [], []
        level = None
        stratum = DEFAULT_STRATUM
        opened = None
        failed = False
        for t, _, _, rec in recs:
            kind = rec.event
            if kind == "enter":
                if failed:
                    raise CohortError(f"subject {sid!r}: re-entry after failure")
                if opened is not None:
                    raise CohortError(f"subject {sid!r}: overlapping risk intervals at {t}")
                if intervals and t < intervals[-1][1]:
                    raise CohortError(f"subject {sid!r}: overlapping risk intervals at {t}")
                if level is None:
                    raise CohortError(f"subject {sid!r}: enters at {t} without a covariate level")
                opened = t
            elif kind in ("exit", "fail"):
                if opened is None or t <= opened:
                    what = "failure" if kind == "fail" else "exit"
                    raise CohortError(f"subject {sid!r}: {what} at {t} while not at risk")
                intervals.append((opened, t))
                opened = None
                if kind == "fail":
                    failed = True
                    failures.append(FailureEvent(t, sid, _path_value(cov_path, t)))
            elif kind == "cov":
                level = levels.index_of(rec.value)
                cov_path.append((t, level))
            else:
                if rec.value in ("", None):
                    raise CohortError(f"subject {sid!r}: empty stratum label")
                stratum = str(rec.value)
                strat_path.append((t, stratum))
        if opened is not None and opened < tau:
            intervals.append((opened, tau))
        if not cov_path:
            if intervals:
                raise CohortError(f"subject {sid!r}: no covariate level")
            continue
        if not strat_path:
            strat_path = [(cov_path[0][0], stratum)]
        subjects.append(Subject(sid, tuple(intervals), _compress(cov_path), _compress(strat_path)))
    if strata is None:
        labels = {v for s in subjects for _, v in s.stratum_path}
        strata = tuple(sorted(labels or {DEFAULT_STRATUM}, key=id_sort_key))
    return Cohort.from_subjects(subjects, tau, levels, strata, failures)


def _compress(path):
    """Drop redundant entries; keep the last value recorded at each time."""
    out = []
    for t, v in path:
        if out and out[-1][0] == t:
            out[-1] = (t, v)
        elif not out or out[-1][1] != v:
            out.append((t, v))
    return tuple(out)


def risk_set(cohort: Cohort, t: float) -> RiskSet:
    """Members at risk at time ``t`` with their level and stratum counts."""
    if not 0 < t <= cohort.tau:
        raise ValueError(f"t={t} outside (0, tau={cohort.tau}]")
    seg = cohort._seg
    hit = np.flatnonzero((seg["start"] < t) & (t <= seg["end"]))
    order = np.argsort(seg["sub"][hit], kind="stable")
    hit = hit[order]
    positions = seg["sub"][hit]
    ids = cohort.ids
    return _make_risk_set(
        float(t),
        tuple(ids[p] for p in positions),
        positions,
        seg["level"][hit],
        seg["stratum"][hit],
        cohort.levels.size,
        cohort.strata,
    )


def failure_risk_set(cohort: Cohort, index: int) -> RiskSet:
    """Risk set seen by the ``index``-th failure.

    Tied failures are processed one at a time in ascending subject order; a
    tied case already processed has left the risk set of those after it.
    """
    event = cohort.failures[index]
    rs = risk_set(cohort, event.time)
    earlier = []
    j = index - 1
    while j >= 0 and cohort.failures[j].time == event.time:
        earlier.append(rs.position_of(cohort.failures[j].case_id))
        j -= 1
    return rs.without(earlier) if earlier else rs


def level_index(cohort: Cohort, subject_id, t: float) -> int:
    """Index into the level set of ``Z_i(t)``."""
    s = cohort.subjects[cohort.position_of(subject_id)]
    if not s.is_at_risk(t):
        raise NotAtRiskError(f"subject {subject_id!r} not at risk at t={t}")
    return s.level_at(t)


def read_event_csv(path) -> list[EventRecord]:
    """Read ``subject_id,time,event,value`` records."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "time", "event", "value"} - set(reader.fieldnames or ())
        if missing:
            raise CohortError(f"event file missing columns: {sorted(missing)}")
        records = []
        last_time: dict[str, float] = {}
        for row in reader:
            try:
                t = float(row["time"])
            except (TypeError, ValueError):
                raise CohortError(f"bad time {row['time']!r}") from None
            sid = row["subject_id"]
            if t < last_time.get(sid, -np.inf):
                raise CohortError(f"subject {sid!r}: times not ascending")
            last_time[sid] = t
            records.append(EventRecord(sid, t, row["event"].strip(), (row["value"] or "").strip()))
    return records


def cohort_records(cohort: Cohort) -> list[EventRecord]:
    """Event records reproducing ``cohort`` (inverse of :func:`build_cohort`)."""
    failed_at = {f.case_id: f.time for f in cohort.failures}
    records = []
    for s in cohort.subjects:
        events = []
        for t, k in s.covariate_path:
            events.append((t, 1, "cov", cohort.levels.labels[k]))
        for t, lab in s.stratum_path:
            events.append((t, 1, "stratum", lab))
        for a, b in s.risk_intervals:
            events.append((a, 2, "enter", ""))
            kind = "fail" if failed_at.get(s.id) == b else "exit"
            events.append((b, 0, kind, ""))
        events.sort(key=lambda e: e[:2])
        records.extend(EventRecord(s.id, t, kind, value) for t, _, kind, value in events)
    return records


def write_event_csv(path, records: Iterable[EventRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "event", "value"])
        for r in records:
            w.writerow([r.subject_id, repr(float(r.time)), r.event, r.value])
