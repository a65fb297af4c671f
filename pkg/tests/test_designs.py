import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhcohort import DesignSpec, build_cohort, enumerate_design, risk_set, sample_cohort
from mhcohort.designs import (
    keyed_rng,
    read_sampled_csv,
    sample_counter_matching,
    sample_failure,
    sample_full,
    sample_matching,
    sample_srs,
    write_sampled_csv,
)
from mhcohort.errors import DeficientStratumError, DesignError


def make_risk_set(levels, strata=None):
    strata = strata or ["a"] * len(levels)
    records = []
    for i, (lev, s) in enumerate(zip(levels, strata)):
        sid = str(i)
        records += [(sid, 0.0, "cov", str(lev)), (sid, 0.0, "stratum", s), (sid, 0.0, "enter", ""),
                    (sid, 1.0, "exit", "")]
    return risk_set(build_cohort(records), 0.5)


def all_designs(rs):
    out = [DesignSpec("full")]
    n = rs.n_t
    for m in range(2, min(n, 4) + 1):
        out.append(DesignSpec("srs", m=m))
    counts = [int(c) for c in rs.stratum_counts]
    if all(c >= 1 for c in counts):
        for ms in itertools.product(*[range(1, min(c, 3) + 1) for c in counts]):
            out.append(DesignSpec("matching", m_per_stratum=ms))
            out.append(DesignSpec("counter_matching", m_per_stratum=ms))
    return out


def test_full_fixture_a(fixture_a):
    rs = risk_set(fixture_a, 1.0)
    sf = sample_full(rs, "s1")
    assert len(sf.member_ids) == 4
    assert np.all(sf.weights == 1)
    assert sf.member_ids[0] == "s1"


def test_full_singleton():
    rs = make_risk_set([1])
    sf = sample_full(rs, "0")
    assert sf.member_ids == ("0",) and sf.weights.tolist() == [1.0]


def test_srs_weights():
    rs = make_risk_set([0] * 5 + [1] * 5)
    sf = sample_srs(rs, "3", 2, keyed_rng(1, 0))
    assert len(sf.member_ids) == 2
    assert sf.weights.tolist() == [5.0, 5.0]


def test_srs_m_equals_n_is_full():
    rs = make_risk_set([0, 1, 0, 1])
    sf = sample_srs(rs, "2", 4, keyed_rng(1, 0))
    assert sorted(sf.member_ids) == sorted(rs.members)
    assert np.all(sf.weights == 1)


def test_srs_deficient_and_clamp():
    rs = make_risk_set([0, 1])
    with pytest.raises(DeficientStratumError):
        sample_srs(rs, "0", 3, keyed_rng(1, 0))
    sf = sample_srs(rs, "0", 3, keyed_rng(1, 0), clamp=True)
    assert len(sf.member_ids) == 2 and np.all(sf.weights == 1)


def test_srs_inclusion_frequency():
    rs = make_risk_set([0, 1, 0, 1])
    rng = keyed_rng(2024, 0)
    draws = 100_000
    hits = Counter()
    for _ in range(draws):
        hits.update(sample_srs(rs, "0", 3, rng).member_ids[1:])
    for sid in ["1", "2", "3"]:
        freq = hits[sid] / draws
        se = np.sqrt(2 / 3 * 1 / 3 / draws)
        assert abs(freq - 2 / 3) < max(0.01, 3 * se)


def test_matching_weights_and_stratum():
    rs = make_risk_set([0] * 10, ["a"] * 5 + ["b"] * 5)
    sf = sample_matching(rs, "1", (2, 2), keyed_rng(3, 0))
    assert len(sf.member_ids) == 2
    assert sf.weights.tolist() == [5.0, 5.0]
    assert set(sf.strata) == {"a"}


def test_matching_small_stratum_stays_inside():
    rs = make_risk_set([0] * 10, ["a"] * 3 + ["b"] * 7)
    rng = keyed_rng(5, 0)
    for _ in range(200):
        sf = sample_matching(rs, "0", (2, 2), rng)
        assert set(sf.strata) == {"a"}


def test_matching_single_stratum_is_srs():
    rs = make_risk_set([0, 1, 1, 0, 1, 0])
    a = sample_matching(rs, "2", (3,), keyed_rng(9, 1))
    b = sample_srs(rs, "2", 3, keyed_rng(9, 1))
    assert a == b


def test_counter_matching_weights():
    rs = make_risk_set([0] * 10, ["a"] * 5 + ["b"] * 5)
    sf = sample_counter_matching(rs, "0", (1, 1), keyed_rng(4, 0))
    assert len(sf.member_ids) == 2
    assert sf.strata == ("a", "b")
    assert sf.weights.tolist() == [5.0, 5.0]


def test_counter_matching_full_strata_is_full_cohort():
    rs = make_risk_set([0, 1, 0, 1, 1], ["a", "a", "b", "b", "b"])
    sf = sample_counter_matching(rs, "3", (2, 3), keyed_rng(4, 0))
    assert sorted(sf.member_ids) == sorted(rs.members)
    assert np.all(sf.weights == 1)


def test_counter_matching_inclusion_frequency():
    rs = make_risk_set([0] * 8, ["a"] * 4 + ["b"] * 4)
    rng = keyed_rng(77, 0)
    draws = 100_000
    hits = Counter()
    for _ in range(draws):
        hits.update(sample_counter_matching(rs, "0", (1, 1), rng).member_ids[1:])
    for sid in ["4", "5", "6", "7"]:
        assert abs(hits[sid] / draws - 0.25) < 0.01


def test_counter_matching_deficient_and_clamp():
    rs = make_risk_set([0, 0, 1], ["a", "a", "b"])
    with pytest.raises(DeficientStratumError):
        sample_counter_matching(rs, "0", (1, 2), keyed_rng(1, 0))
    sf = sample_counter_matching(rs, "0", (1, 2), keyed_rng(1, 0), clamp=True)
    assert sf.weights[sf.member_ids.index("2")] == 1.0


@pytest.mark.parametrize("kind,kw", [("srs", {}), ("matching", {"m_per_stratum": (0, 1)}),
                                     ("counter_matching", {}), ("bogus", {})])
def test_design_spec_validation(kind, kw):
    with pytest.raises(DesignError):
        DesignSpec(kind, **kw)


def test_design_spec_aliases():
    assert DesignSpec("cm", m_per_stratum=(1, 1)).kind == "counter_matching"
    assert DesignSpec("full_cohort").kind == "full"


def test_m_per_stratum_mapping():
    d = DesignSpec("matching", m_per_stratum={"b": 3, "a": 2})
    assert d.m_for(("a", "b")).tolist() == [2, 3]
    with pytest.raises(DesignError):
        d.m_for(("a", "c"))


def test_seeded_determinism(fixture_a):
    d = DesignSpec("srs", m=2)
    assert sample_cohort(fixture_a, d, seed=11) == sample_cohort(fixture_a, d, seed=11)


def test_random_design_requires_seed(fixture_a):
    with pytest.raises(DesignError):
        sample_cohort(fixture_a, DesignSpec("srs", m=2))
    with pytest.raises(DesignError):
        sample_failure(risk_set(fixture_a, 1.0), "s1", DesignSpec("srs", m=2))


def test_keyed_streams_independent_of_order():
    a = keyed_rng(5, 1, 3, 7).random(4)
    keyed_rng(5, 1, 3, 6).random(100)
    assert np.array_equal(a, keyed_rng(5, 1, 3, 7).random(4))
    assert not np.array_equal(a, keyed_rng(5, 1, 3, 8).random(4))


def test_enumerate_full_single_row():
    rs = make_risk_set([0, 1, 1])
    table = enumerate_design(rs, DesignSpec("full"))
    assert len({r.members for r in table.rows}) == 1
    assert all(r.pi_set == 1 and r.weight == 1 for r in table.rows)


@pytest.mark.parametrize("n", range(1, 9))
def test_enumeration_identities(n):
    rng = np.random.default_rng(n)
    levels = rng.integers(0, 2, n).tolist()
    strata = ["a" if i % 2 == 0 else "b" for i in range(n)] if n > 1 else ["a"]
    rs = make_risk_set(levels, strata)
    for d in all_designs(rs):
        checks = enumerate_design(rs, d).verify()
        assert all(checks.values()), (d, checks)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=2, max_size=7))
def test_enumeration_identities_random_strata(strata):
    rs = make_risk_set([i % 2 for i in range(len(strata))], strata)
    for d in all_designs(rs):
        assert all(enumerate_design(rs, d).verify().values())


def test_enumeration_guard():
    rs = make_risk_set([0] * 13)
    with pytest.raises(DesignError):
        enumerate_design(rs, DesignSpec("full"))


def test_empirical_matches_enumeration():
    rs = make_risk_set([0, 1, 0, 1, 1], ["a", "a", "b", "b", "b"])
    d = DesignSpec("counter_matching", m_per_stratum=(1, 2))
    table = enumerate_design(rs, d)
    exact = {r.members: float(r.pi_given_case) for r in table.rows if r.case == 0}
    rng = keyed_rng(1, 2)
    draws = 20_000
    seen = Counter()
    for _ in range(draws):
        sf = sample_failure(rs, "0", d, rng)
        seen[frozenset(rs.members.index(m) for m in sf.member_ids)] += 1
    assert set(seen) == set(exact)
    for r, p in exact.items():
        assert abs(seen[r] / draws - p) < 4 * np.sqrt(p * (1 - p) / draws)


def test_sampled_csv_round_trip(tmp_path, fixture_a):
    sampled = sample_cohort(fixture_a, DesignSpec("srs", m=2), seed=3)
    path = tmp_path / "s.csv"
    write_sampled_csv(path, sampled)
    assert read_sampled_csv(path) == sampled


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 1000))
def test_srs_members_distinct_and_at_risk(n, seed):
    rs = make_risk_set([i % 2 for i in range(n)])
    m = min(n, 3)
    sf = sample_srs(rs, "0", m, keyed_rng(seed, 0))
    assert len(set(sf.member_ids)) == m
    assert set(sf.member_ids) <= set(rs.members)
    assert np.isclose(sf.weights.sum(), n)
