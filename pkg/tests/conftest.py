import numpy as np
import pytest

from mhcohort import LevelSet, build_cohort

FIXTURE_A = [
    ("s1", 0.0, "cov", "1"), ("s1", 0.0, "enter", ""), ("s1", 1.0, "fail", ""),
    ("s2", 0.0, "cov", "0"), ("s2", 0.0, "enter", ""), ("s2", 2.0, "fail", ""),
    ("s3", 0.0, "cov", "1"), ("s3", 0.0, "enter", ""), ("s3", 3.0, "exit", ""),
    ("s4", 0.0, "cov", "0"), ("s4", 0.0, "enter", ""), ("s4", 1.5, "exit", ""),
]

# three-level score set with hand-chosen R (rows: case level)
FIXTURE_B_ALPHAS = (0.0, 1.0, 2.0)
FIXTURE_B_R = np.array([[0.0, 3.0, 1.0],
                        [5.0, 0.0, 2.0],
                        [4.0, 6.0, 0.0]])


@pytest.fixture
def fixture_a_records():
    return list(FIXTURE_A)


@pytest.fixture
def fixture_a():
    return build_cohort(FIXTURE_A)


@pytest.fixture
def levels3():
    return LevelSet(FIXTURE_B_ALPHAS)


def random_cohort_records(rng, n, n_levels=2, strata=("a", "b"), tau=1.0, changes=True):
    """Random event records with staggered entry, covariate changes and failures."""
    records = []
    for i in range(n):
        sid = str(i)
        start = float(rng.uniform(0, 0.3)) if rng.random() < 0.3 else 0.0
        end = float(rng.uniform(start + 0.05, tau))
        lev = int(rng.integers(n_levels))
        records.append((sid, start, "cov", str(lev)))
        records.append((sid, start, "stratum", strata[int(rng.integers(len(strata)))]))
        records.append((sid, start, "enter", ""))
        if changes and rng.random() < 0.3:
            mid = float(rng.uniform(start, end))
            if start < mid < end:
                records.append((sid, mid, "cov", str(int(rng.integers(n_levels)))))
        records.append((sid, end, "fail" if rng.random() < 0.5 else "exit", ""))
    return records


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"#{k:<2} {'PASS' if ok else 'FAIL'}  {detail}")
