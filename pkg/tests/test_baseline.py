import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cohort_records
from mhcohort import CLASSICAL, DesignSpec, build_cohort, sample_cohort
from mhcohort.baseline import (
    BASELINE_COLUMNS,
    StepFunction,
    baseline_cumhaz,
    baseline_variance,
    write_baseline_csv,
)
from mhcohort.cohort import failure_risk_set
from mhcohort.designs import SampledFailure


def one_failure():
    ids = ("0", "1", "2", "3")
    return SampledFailure(1.0, "0", 1, 4, ids, np.array([1, 1, 0, 0]), ("0",) * 4, np.ones(4))


def test_single_failure_jump():
    lam = baseline_cumhaz([one_failure()], 1.0)
    assert lam(1.0) == 0.25
    assert lam(0.999) == 0.0


def test_no_failures():
    lam = baseline_cumhaz([], 2.0)
    assert lam(5.0) == 0.0


def test_single_failure_variance_jumps():
    rep = baseline_variance([one_failure()], 1.0, sigma2=0.0, n=4)
    assert rep.omega2_hat(1.0) == pytest.approx(4 / 16)
    assert rep.B_hat(1.0) == pytest.approx(2 / 16)


def test_no_exposed_members_B_zero():
    ids = ("0", "1")
    f = SampledFailure(0.5, "0", 0, 2, ids, np.array([0, 0]), ("0", "0"), np.ones(2))
    rep = baseline_variance([f], 3.0, sigma2=10.0, n=2)
    assert rep.B_hat(1.0) == 0.0
    assert rep.sigma2_lambda(1.0, 1.0) == rep.omega2_hat(1.0)


def test_step_function_merges_ties():
    s = StepFunction.from_jumps([2.0, 1.0, 2.0], [1.0, 0.5, 0.25])
    assert s.jump_times.tolist() == [1.0, 2.0]
    assert s(2.0) == 1.75
    assert s(0.0) == 0.0
    assert np.allclose(s(np.array([0.5, 1.5, 3.0])), [0, 0.5, 1.75])


def _sampled(seed, design=DesignSpec("full")):
    rng = np.random.default_rng(seed)
    cohort = build_cohort(random_cohort_records(rng, 30, strata=("a",)), tau=1.0)
    return cohort, sample_cohort(cohort, design, seed=seed)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_full_cohort_null_is_nelson_aalen(seed):
    cohort, sampled = _sampled(seed)
    lam = baseline_cumhaz(sampled, 1.0)
    total = sum(1.0 / failure_risk_set(cohort, j).n_t for j in range(len(cohort.failures)))
    assert lam(1.0) == pytest.approx(total, rel=1e-14, abs=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10), st.floats(0, 50))
def test_report_properties(seed, phi, sigma2):
    _, sampled = _sampled(seed, DesignSpec("srs", m=3, clamp=True))
    rep = baseline_variance(sampled, phi, sigma2, n=30)
    grid = np.linspace(0, 1, 21)
    assert np.all(np.diff(rep.lambda_hat(grid)) >= 0)
    assert np.all(np.diff(rep.omega2_hat(grid)) >= 0)
    for s in grid[::4]:
        for t in grid[::5]:
            assert rep.sigma2_lambda(s, t) == pytest.approx(rep.sigma2_lambda(t, s))
        assert rep.sigma2_lambda(s, s) >= rep.omega2_hat(s) - 1e-15


def test_jumps_decrease_in_phi():
    _, sampled = _sampled(3)
    a = baseline_cumhaz(sampled, 1.0)
    b = baseline_cumhaz(sampled, 1.5)
    has_exposed = np.array([np.any(s.levels == 1) for s in sampled])
    times = np.array([s.time for s in sampled])
    for t, ex in zip(times, has_exposed):
        ja = a(t) - a(t - 1e-12)
        jb = b(t) - b(t - 1e-12)
        if ex:
            assert jb < ja
        else:
            assert jb == pytest.approx(ja)


def test_nan_sigma2_treated_as_zero():
    rep = baseline_variance([one_failure()], 1.0, float("nan"), n=4)
    assert rep.sigma2 == 0.0


def test_beyond_data_and_table(tmp_path):
    rep = baseline_variance([one_failure()], 1.0, 2.0, n=4)
    assert rep.beyond_data(1.5) and not rep.beyond_data(1.0)
    assert rep.lambda_hat(10.0) == rep.lambda_hat(1.0)
    table = rep.table([0.5, 1.0])
    assert table.shape == (2, 5)
    assert table[1, 4] == pytest.approx(np.sqrt(rep.sigma2_lambda(1.0, 1.0) / 4))
    path = tmp_path / "b.csv"
    write_baseline_csv(path, rep)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(BASELINE_COLUMNS)
    assert len(lines) == 2


def test_uses_estimation_weights():
    _, sampled = _sampled(5, DesignSpec("srs", m=2, clamp=True))
    lam = baseline_cumhaz(sampled, 1.0, CLASSICAL)
    manual = sum(1 / s.weights.sum() for s in sampled)
    assert lam(1.0) == pytest.approx(manual)
