import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURE_B_ALPHAS, FIXTURE_B_R, random_cohort_records
from mhcohort import CLASSICAL, DesignSpec, LevelSet, accumulate, build_cohort, estimate, sample_cohort
from mhcohort.cohort import failure_risk_set
from mhcohort.designs import SampledFailure
from mhcohort.errors import DegenerateEstimateError, NotPositiveDefiniteError
from mhcohort.estimator import (
    Z95,
    estimate_state,
    estimate_stratified,
    g_value,
    model_variation,
    optimal_c,
    optional_variation,
    score,
    sigma2_from,
    solve_phi,
    ssq,
    state_from_R,
    state_from_shares,
    variance,
)


def sf(levels, weights, n_t, case_level=None, time=1.0, strata=None):
    levels = np.asarray(levels)
    ids = tuple(str(i) for i in range(len(levels)))
    return SampledFailure(time, ids[0], int(levels[0] if case_level is None else case_level), n_t, ids,
                          levels, tuple(strata or ["0"] * len(levels)), np.asarray(weights, dtype=float))


def test_fixture_a_R(fixture_a):
    state = accumulate(sample_cohort(fixture_a, DesignSpec("full")), CLASSICAL)
    assert state.R[1, 0] == pytest.approx(0.5, abs=1e-15)
    assert state.R[0, 1] == pytest.approx(0.5, abs=1e-15)


def test_single_failure_no_cross_mass():
    state = accumulate([sf([1, 1, 1], [1, 1, 1], 3)], CLASSICAL)
    assert state.R[0, 1] == 0 and state.R[1, 0] == 0
    assert state.R[1, 1] == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_full_cohort_reduces_to_count_ratio(seed):
    rng = np.random.default_rng(seed)
    cohort = build_cohort(random_cohort_records(rng, 15, strata=("a",)), tau=1.0)
    if not cohort.failures:
        return
    state = accumulate(sample_cohort(cohort, DesignSpec("full")), CLASSICAL)
    R = np.zeros((2, 2))
    for j, f in enumerate(cohort.failures):
        rs = failure_risk_set(cohort, j)
        R[f.case_level_index] += rs.level_counts / rs.n_t
    assert np.allclose(state.R, R, rtol=1e-14, atol=0)


def test_shares_sum_to_design_weight_total():
    s = sf([0, 1, 1], [4.0, 4.0, 4.0], 12)
    assert s.shares(2).sum() * 12 == pytest.approx(s.weights.sum())


def test_accumulate_rejects_empty():
    with pytest.raises(DegenerateEstimateError):
        accumulate([], CLASSICAL)


def test_g_value_examples():
    state = state_from_R((0.0, 1.0), [[0, 0.5], [0.5, 0]], n=4)
    assert g_value(state, 0, 1, 1.0) == 0.0
    for phi in [0.3, 1.0, 7.0]:
        assert g_value(state, 0, 1, phi, 1) == pytest.approx(state.R[0, 1])


@pytest.mark.parametrize("phi0", [0.5, 1.0, 3.0])
def test_g_value_zero_at_truth_noise_free(phi0):
    a = np.array(FIXTURE_B_ALPHAS)
    I = np.array([[0, 1.0, 2.0], [1.0, 0, 0.5], [2.0, 0.5, 0]])
    R = phi0 ** a[:, None] * I
    state = state_from_R(a, R, n=10)
    for j, k in [(0, 1), (0, 2), (1, 2)]:
        assert g_value(state, j, k, phi0) == pytest.approx(0.0, abs=1e-12)
    assert solve_phi(state) == pytest.approx(phi0, rel=1e-9)


@pytest.mark.parametrize("p", [0, 1, 2, 3])
def test_g_value_derivatives_by_finite_difference(p):
    state = state_from_R(FIXTURE_B_ALPHAS, FIXTURE_B_R, n=5)
    if p == 0:
        return
    h = 1e-5
    phi = 1.3
    fd = (g_value(state, 0, 2, phi + h, p - 1) - g_value(state, 0, 2, phi - h, p - 1)) / (2 * h)
    assert g_value(state, 0, 2, phi, p) == pytest.approx(fd, rel=1e-6)


def test_classical_score_form():
    state = state_from_R((0.0, 1.0), [[0, 1.5], [4.0, 0]], n=10)
    for phi in [0.5, 2.0, 3.0]:
        assert score(state, phi) == pytest.approx((phi * 1.5 - 4.0) * 1.5 / 10)
    assert solve_phi(state) == 4.0 / 1.5


def test_all_zero_R():
    state = state_from_R((0.0, 1.0), np.zeros((2, 2)))
    assert score(state, 2.0) == 0.0
    with pytest.raises(DegenerateEstimateError):
        solve_phi(state)


def test_classical_closed_form():
    assert solve_phi(state_from_R((0.0, 1.0), [[0, 1.0], [2.0, 0]])) == 2.0


def test_noninteger_scores_single_pair():
    state = state_from_R((0.0, 2.0), [[0, 1.0], [4.0, 0]])
    assert solve_phi(state) == pytest.approx(2.0, rel=1e-14)


def test_zero_estimate_flagged():
    state = state_from_R((0.0, 1.0), [[0, 1.0], [0.0, 0]])
    with pytest.raises(DegenerateEstimateError) as exc:
        solve_phi(state)
    assert exc.value.reason == "zero_estimate"
    result = estimate_state(state)
    assert result.degenerate and result.phi_hat == 0.0 and "zero_estimate" in result.degenerate_flags


def test_infinite_estimate_flagged():
    result = estimate_state(state_from_R((0.0, 1.0), [[0, 0.0], [1.0, 0]]))
    assert result.degenerate and "infinite_estimate" in result.degenerate_flags


def test_fixture_b_bracketing():
    state = state_from_R(FIXTURE_B_ALPHAS, FIXTURE_B_R, n=20)
    grid = np.exp(np.linspace(np.log(1e-3), np.log(20), 200_001))
    best = grid[np.argmin(ssq(state, grid))]
    phi = solve_phi(state)
    assert abs(math.log(phi) - math.log(best)) < 1e-3
    assert score(state, phi * 0.9) * score(state, phi * 1.1) < 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_root_is_zero_of_score(seed):
    rng = np.random.default_rng(seed)
    R = rng.uniform(0.1, 5, (3, 3))
    np.fill_diagonal(R, 0)
    state = state_from_R(FIXTURE_B_ALPHAS, R, n=50)
    phi = solve_phi(state)
    assert abs(score(state, phi)) <= 1e-10 * (1 + abs(score(state, 1.0)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_classical_ratio_exact(r10, r01):
    state = state_from_R((0.0, 1.0), [[0, r01], [r10, 0]])
    assert solve_phi(state) == pytest.approx(r10 / r01, rel=1e-12)


def test_optional_variation_single_failure():
    state = state_from_shares((0.0, 1.0), [0], [[0.75, 0.25]], n=1)
    I3, I2 = optional_variation(state, 1.0)
    # case level 0 with [W_01, W_01]: phi^-a_0 s_1 s_1, symmetrised over orderings of (0, 1, 1)
    assert I3[0, 1, 1] == pytest.approx(0.25 ** 2 / 3)
    assert I3[1, 0, 1] == I3[0, 1, 1] == I3[1, 1, 0]


def test_no_failures_zero_variation():
    state = state_from_shares((0.0, 1.0), np.zeros(0, dtype=int), np.zeros((0, 2)), n=5)
    I3, I2 = optional_variation(state, 1.3)
    assert not I3.any() and not I2.any()


def test_model_variation_single_failure():
    state = state_from_shares((0.0, 1.0), [1], [[0.5, 0.5]], n=1)
    I3, _ = model_variation(state, 1.0)
    assert I3[0, 1, 1] == pytest.approx(0.125)


def test_model_variation_single_level_mass():
    state = state_from_shares(FIXTURE_B_ALPHAS, [1, 1], [[0, 1, 0], [0, 1, 0]], n=3)
    I3, _ = model_variation(state, 4.2)
    mask = np.ones((3, 3, 3), bool)
    mask[1, 1, 1] = False
    assert not I3[mask].any()


def test_classical_variance_formula():
    rng = np.random.default_rng(3)
    s1 = rng.uniform(0.1, 0.9, 30)
    shares = np.column_stack([1 - s1, s1])
    cases = rng.integers(0, 2, 30)
    state = state_from_shares((0.0, 1.0), cases, shares, n=40)
    phi = solve_phi(state)
    I3, I2 = optional_variation(state, phi)
    rep = variance(state, (I3, I2), phi)
    expect = (phi ** 2 * I3[0, 1, 1] + phi * I3[1, 0, 0]) / I2[0, 1] ** 2
    assert rep.sigma2 == pytest.approx(expect, rel=1e-12)
    assert rep.sigma2_theta == pytest.approx(rep.sigma2 / phi ** 2)


@pytest.mark.parametrize("kappa", [0.01, 1.0, 37.0])
def test_variance_c_homogeneity(kappa):
    state = state_from_R(FIXTURE_B_ALPHAS, FIXTURE_B_R, n=20)
    shares = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4]])
    state = state_from_shares(FIXTURE_B_ALPHAS, [0, 1, 2], shares, n=3, c=np.array([1.0, 2.0, 0.5]))
    phi = 1.2
    I = optional_variation(state, phi)
    a = variance(state, I, phi).sigma2
    b = variance(state.with_c(kappa * state.c), I, phi).sigma2
    assert b == pytest.approx(a, rel=1e-12)


def test_optimal_c_one_pair():
    c, s2 = optimal_c([2.0], [[3.0]])
    assert s2 == pytest.approx(3.0 / 4.0)
    assert c[0] > 0


def test_optimal_c_identity():
    c, s2 = optimal_c([1.0, 1.0], np.eye(2))
    assert np.allclose(c, [1.0, 1.0])
    assert s2 == pytest.approx(0.5)


def test_optimal_c_not_pd():
    with pytest.raises(NotPositiveDefiniteError):
        optimal_c([1.0, 1.0], [[1.0, 2.0], [2.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_optimal_c_dominates(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    Gamma = A @ A.T + 0.1 * np.eye(3)
    beta = rng.uniform(0.2, 3, 3) * rng.choice([-1, 1], 3)
    c, s2 = optimal_c(beta, Gamma)
    assert sigma2_from(beta, Gamma, c) == pytest.approx(s2, rel=1e-9)
    for _ in range(20):
        assert s2 <= sigma2_from(beta, Gamma, rng.uniform(0, 1, 3)) + 1e-10


def test_fixture_a_estimate(fixture_a):
    res = estimate(sample_cohort(fixture_a, DesignSpec("full")), CLASSICAL)
    assert res.phi_hat == 1.0
    assert math.isfinite(res.sigma2) and res.sigma2 > 0
    assert not res.degenerate


def test_wald_interval(fixture_a):
    res = estimate(sample_cohort(fixture_a, DesignSpec("full")), CLASSICAL)
    half = Z95 * math.sqrt(res.sigma2_theta / res.n)
    assert res.ci_low == pytest.approx(math.exp(res.theta_hat - half))
    assert res.ci_high == pytest.approx(math.exp(res.theta_hat + half))


def _random_sampled(seed, levels=CLASSICAL, n=60, design=DesignSpec("srs", m=3), strata=("a",)):
    rng = np.random.default_rng(seed)
    cohort = build_cohort(random_cohort_records(rng, n, levels.size, strata=strata), levels, tau=1.0)
    d = design
    if d.kind in ("matching", "counter_matching"):
        d = DesignSpec(d.kind, m_per_stratum=d.m_per_stratum, clamp=True)
    else:
        d = DesignSpec(d.kind, m=d.m, clamp=True)
    return sample_cohort(cohort, d, seed=seed)


def test_equal_and_optimal_agree_single_pair():
    sampled = _random_sampled(1)
    a = estimate(sampled, CLASSICAL, c="equal")
    b = estimate(sampled, CLASSICAL, c="optimal")
    assert a.phi_hat == b.phi_hat


def test_optimal_two_stage_three_levels():
    levels = LevelSet(FIXTURE_B_ALPHAS)
    sampled = _random_sampled(4, levels, n=200)
    eq = estimate(sampled, levels, c="equal")
    opt = estimate(sampled, levels, c="optimal")
    assert opt.phi_hat > 0 and not opt.degenerate
    assert abs(math.log(opt.phi_hat / eq.phi_hat)) < 0.1
    if "gamma_not_pd" not in opt.degenerate_flags:
        # at the stage-one estimates the chosen weights cannot do worse than equal ones
        rep = eq.report
        c_opt, s2 = optimal_c(rep.beta_hat, rep.Gamma_hat)
        assert np.allclose(c_opt, opt.c_weights)
        assert s2 <= eq.sigma2 * (1 + 1e-12)


def test_estimate_invariant_to_relabeling():
    sampled = _random_sampled(7)
    renamed = [SampledFailure(s.time, "x" + str(s.case_id), s.case_level_index, s.n_t,
                              tuple("x" + str(m) for m in s.member_ids), s.levels, s.strata, s.weights)
               for s in sampled]
    assert estimate(sampled, CLASSICAL).phi_hat == estimate(renamed, CLASSICAL).phi_hat


def test_model_variance_method():
    sampled = _random_sampled(8, n=120)
    a = estimate(sampled, CLASSICAL, variance_method="optional")
    b = estimate(sampled, CLASSICAL, variance_method="model")
    assert a.phi_hat == b.phi_hat
    assert b.variance_method == "model"
    assert b.sigma2 > 0


def test_to_dict_fields(fixture_a):
    d = estimate(sample_cohort(fixture_a, DesignSpec("full")), CLASSICAL).to_dict()
    assert list(d) == ["phi_hat", "theta_hat", "sigma2", "sigma2_theta", "ci_low", "ci_high", "n",
                       "failures", "c_weights", "variance_method", "degenerate_flags"]


def test_stratified_one_stratum_matches_pooled():
    sampled = _random_sampled(9, design=DesignSpec("matching", m_per_stratum=(3,)))
    a = estimate(sampled, CLASSICAL)
    b = estimate_stratified(sampled, CLASSICAL)
    assert a.phi_hat == b.phi_hat
    assert b.sigma2 == pytest.approx(a.sigma2, rel=1e-12)


def test_stratified_sums_match_pooled():
    sampled = _random_sampled(10, n=120, design=DesignSpec("matching", m_per_stratum=(2, 3)), strata=("a", "b"))
    a = estimate(sampled, CLASSICAL)
    b = estimate_stratified(sampled, CLASSICAL)
    assert b.phi_hat == a.phi_hat
    per = b.detail["strata"]
    total = sum(v["I_hat_jkq"] for v in per.values())
    assert np.allclose(total, a.report.I_hat_jkq, rtol=1e-12)
    assert b.sigma2 == pytest.approx(a.sigma2, rel=1e-10)


def test_stratified_rejects_crossing_sets():
    sampled = _random_sampled(11, design=DesignSpec("counter_matching", m_per_stratum=(1, 1)), strata=("a", "b"))
    if any(len(set(s.strata)) > 1 for s in sampled):
        with pytest.raises(Exception):
            estimate_stratified(sampled, CLASSICAL)


def test_null_identity_per_set():
    rng = np.random.default_rng(0)
    A0, A1 = rng.uniform(1e-3, 1e3, (2, 10_000))
    a = 1 / (A0 + A1)
    assert np.max(np.abs(a ** 2 * A0 * A1 * (A0 + A1) - a * A0 * A1)) < 1e-12 * np.max(a * A0 * A1)
