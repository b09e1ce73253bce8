import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from isoturnover.coding import EncodedDataset
from isoturnover.dagtest import (
    HypothesisSet,
    Polyforest,
    TierConfig,
    build_polyforest_evidence,
    build_polyforest_nearest,
    conditional_dominance_test,
    dag_test,
    dag_test_tiered,
    derive_tiers,
    marginal_risk_ratio,
)
from isoturnover.errors import InputError, UndefinedResultError
from isoturnover.lattice import GridSpec


def _grid(d, lv=3):
    return GridSpec((lv,) * d, tuple(f"i{j}" for j in range(d)))


def _upward_closed_within(P, rej):
    for i in np.flatnonzero(rej):
        above = (P >= P[i]).all(axis=1)
        if not rej[above].all():
            return False
    return True


# ten nodes: roots A, B, C with 2, 2 and 3 leaves
_PROFILES = np.array([
    [2, 2, 0, 0, 0, 0],  # 0 A
    [2, 1, 0, 0, 0, 0],  # 1
    [1, 2, 0, 0, 0, 0],  # 2
    [0, 0, 2, 2, 0, 0],  # 3 B
    [0, 0, 2, 1, 0, 0],  # 4
    [0, 0, 1, 2, 0, 0],  # 5
    [0, 0, 0, 0, 2, 2],  # 6 C
    [0, 0, 0, 0, 2, 1],  # 7
    [0, 0, 0, 0, 1, 2],  # 8
    [0, 0, 0, 0, 1, 1],  # 9
])
_PARENT = np.array([-1, 0, 0, -1, 3, 3, -1, 6, 6, 6])


def test_hand_executed_rounds():
    p = np.array([0.01, 0.005, 0.2, 0.02, 0.015, 0.5, 0.024, 0.3, 0.3, 0.001])
    hyps = HypothesisSet(_PROFILES, p_valid=p)
    forest = Polyforest(_PARENT)
    forest.validate(_PROFILES)
    res = dag_test(hyps, forest, 0.05, _grid(6))
    assert sorted(res.rejected_indices.tolist()) == [0, 1, 3, 4, 6, 7, 8, 9]
    r = res.rounds
    assert len(r) == 7
    assert r[0].roots == [0, 3, 6]
    np.testing.assert_allclose(r[0].budgets, [0.1 / 7, 0.1 / 7, 0.15 / 7])
    assert r[0].rejected_roots == [0]
    np.testing.assert_allclose(r[1].budgets, [0.05 / 7, 0.05 / 7, 0.1 / 7, 0.15 / 7])
    assert r[1].rejected_roots == [1]
    np.testing.assert_allclose(r[2].budgets, [0.05 / 6, 0.1 / 6, 0.15 / 6])
    assert r[2].rejected_roots == [6]
    assert r[3].rejected_roots == [9] and sorted(r[3].propagated) == [7, 8]
    assert r[4].rejected_roots == [3]
    assert r[5].rejected_roots == [4]
    assert r[6].rejected_roots == []
    json.loads(res.to_json(hyps))
    assert "round 1" in res.describe()


def test_weak_top_blocks_chain():
    P = np.array([[0, 0], [1, 0], [1, 1]])
    hyps = HypothesisSet(P, p_valid=np.array([0.01, 0.9, 0.9]))
    res = dag_test(hyps, Polyforest(np.array([1, 2, -1])), 0.05)
    assert res.n_rejected == 0
    assert len(res.rounds) == 1 and res.rounds[0].budgets == [0.05]


def test_root_with_small_p_rejects_dominators():
    P = np.array([[0, 1], [1, 1], [2, 1], [2, 0]])
    hyps = HypothesisSet(P, p_valid=np.array([0.01, 1.0, 1.0, 1.0]))
    res = dag_test(hyps, Polyforest(np.array([-1, -1, -1, -1])), 0.05)
    assert res.rejected.tolist() == [True, True, True, False]


def test_alpha_blocking_and_unblocking():
    # node 3 (p=0.01) hangs under the weak root 1 or the 0.02 root 2
    P = np.array([[2, 0, 0], [1, 1, 0], [1, 0, 1], [1, 0, 0]])
    grid = _grid(3)
    hyps = HypothesisSet(P, p_valid=np.array([0.001, 0.10, 0.02, 0.01]))
    rw = dag_test(hyps, Polyforest(np.array([-1, -1, -1, 1])), 0.05, grid)
    rs = dag_test(hyps, Polyforest(np.array([-1, -1, -1, 2])), 0.05, grid)
    assert rw.rejected.tolist() == [True, False, True, False]
    assert rw.rounds[-1].roots == [1] and rw.rounds[-1].budgets == [0.05]
    # node 1 dominates node 3, so it falls by propagation
    assert rs.rejected.all()
    # the 0.02 root is only reached after root 0 frees budget
    assert rs.rounds[0].rejected_roots == [0]
    assert rs.rounds[1].rejected_roots == [2]
    assert rs.rounds[2].rejected_roots == [3]


def test_nearest_prefers_closer_cover():
    P = np.array([[0, 0], [1, 0], [0, 2]])
    f = build_polyforest_nearest(HypothesisSet(P), _grid(2), seed=1)
    assert f.parent.tolist() == [1, -1, -1]


def test_chain_becomes_path():
    P = np.array([[0, 0], [1, 0], [1, 1]])
    f = build_polyforest_nearest(HypothesisSet(P), _grid(2))
    assert f.parent.tolist() == [1, 2, -1]
    assert f.roots.tolist() == [2]


def test_evidence_prefers_smaller_screen_p():
    P = np.array([[0, 0], [1, 0], [0, 1]])
    hyps = HypothesisSet(P, p_screen=np.array([0.5, 0.10, 0.03]))
    assert build_polyforest_evidence(hyps, _grid(2)).parent[0] == 2
    hyps = HypothesisSet(P[:2], p_screen=np.array([0.01, 0.9]))
    assert build_polyforest_evidence(hyps, _grid(2)).parent[0] == 1


def test_evidence_needs_screen_p():
    with pytest.raises(InputError):
        build_polyforest_evidence(HypothesisSet(np.array([[0, 0]])))


@pytest.mark.parametrize("rule", ["nearest", "evidence"])
def test_tie_break_seeded(rule):
    P = np.array([[0, 0], [1, 0], [0, 1]])
    hyps = HypothesisSet(P, p_screen=np.array([0.5, 0.2, 0.2]))
    build = build_polyforest_nearest if rule == "nearest" else build_polyforest_evidence
    assert build(hyps, seed=7).parent.tolist() == build(hyps, seed=7).parent.tolist()
    picks = np.array([build(hyps, seed=s).parent[0] for s in range(1000)])
    assert set(picks) == {1, 2}
    assert min((picks == 1).mean(), (picks == 2).mean()) >= 0.4


def test_invalid_alpha():
    hyps = HypothesisSet(np.array([[0]]), p_valid=np.array([0.5]))
    for a in (0.0, 1.0, -0.1):
        with pytest.raises(InputError):
            dag_test(hyps, Polyforest(np.array([-1])), a)


def test_hypothesis_set_validation():
    with pytest.raises(InputError):
        HypothesisSet(np.array([[0, 1], [0, 1]]))
    with pytest.raises(InputError):
        HypothesisSet(np.array([[0, 1]]), p_valid=np.array([0.0]))
    with pytest.raises(InputError):
        Polyforest(np.array([1, -1])).validate(np.array([[1, 1], [0, 0]]))


def test_empty_hypothesis_set():
    hyps = HypothesisSet(np.zeros((0, 2), dtype=int), p_valid=np.zeros(0), p_screen=np.zeros(0))
    f = build_polyforest_evidence(hyps)
    assert dag_test(hyps, f, 0.05).n_rejected == 0


def _random_instance(rng, m, d=3, lv=4):
    allp = np.array(np.meshgrid(*[np.arange(lv)] * d, indexing="ij")).reshape(d, -1).T
    P = allp[rng.choice(allp.shape[0], size=m, replace=False)]
    p = rng.uniform(0.0005, 1, size=m) ** 2
    return HypothesisSet(P, p_valid=p, p_screen=rng.uniform(0.001, 1, size=m))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_rejections_upward_closed_and_budgets(seed, m):
    rng = np.random.default_rng(seed)
    hyps = _random_instance(rng, m)
    f = build_polyforest_nearest(hyps, seed=seed)
    f.validate(hyps.profiles)
    res = dag_test(hyps, f, 0.05)
    assert _upward_closed_within(hyps.profiles, res.rejected)
    for r in res.rounds:
        assert abs(sum(r.budgets) - 0.05) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_monotone_in_evidence(seed, m):
    rng = np.random.default_rng(seed)
    hyps = _random_instance(rng, m)
    f = build_polyforest_evidence(hyps, seed=seed)
    base = dag_test(hyps, f, 0.1).rejected
    smaller = hyps.p_valid * rng.uniform(0.1, 1.0, size=m)
    more = dag_test(HypothesisSet(hyps.profiles, p_valid=smaller), f, 0.1).rejected
    assert (more >= base).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_single_tier_matches_untiered(seed, m):
    rng = np.random.default_rng(seed)
    hyps = _random_instance(rng, m)
    grid = _grid(3, 4)
    f = build_polyforest_nearest(hyps, grid, seed=seed)
    one = TierConfig({n: 1 for n in grid.item_names})
    a = dag_test(hyps, f, 0.05, grid).rejected
    b = dag_test_tiered(hyps, f, 0.05, one, grid).rejected
    assert (a == b).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_tiered_rejections_upward_closed(seed, m):
    rng = np.random.default_rng(seed)
    hyps = _random_instance(rng, m)
    grid = _grid(3, 4)
    f = build_polyforest_evidence(hyps, grid, seed=seed)
    tiers = TierConfig({"i0": 1, "i1": 2, "i2": 3})
    res = dag_test_tiered(hyps, f, 0.05, tiers, grid)
    assert _upward_closed_within(hyps.profiles, res.rejected)


def _two_node(p1, p2):
    grid = GridSpec((2, 2), ("hi", "lo"))
    hyps = HypothesisSet(np.array([[1, 0], [0, 1]]), p_valid=np.array([p1, p2]))
    return hyps, Polyforest(np.array([-1, -1])), TierConfig({"hi": 1, "lo": 2}), grid


def test_tiered_passes_unspent_budget():
    hyps, f, tiers, grid = _two_node(0.015, 0.022)
    res = dag_test_tiered(hyps, f, 0.04, tiers, grid)
    assert res.rounds[0].rejected_roots == [0, 1]
    # without tiering the 0.022 node misses its 0.02 share in round one
    assert dag_test(hyps, f, 0.04, grid).rounds[0].rejected_roots == [0]
    # 0.04 - 0.015 = 0.025 reaches the tier-2 node
    hyps, f, tiers, grid = _two_node(0.015, 0.026)
    assert dag_test_tiered(hyps, f, 0.04, tiers, grid).rounds[0].rejected_roots == [0]


def test_tiered_gate_stops():
    hyps, f, tiers, grid = _two_node(0.06, 0.001)
    res = dag_test_tiered(hyps, f, 0.04, tiers, grid)
    assert res.n_rejected == 0


def test_tiered_missing_item():
    hyps, f, _, grid = _two_node(0.01, 0.01)
    with pytest.raises(InputError):
        dag_test_tiered(hyps, f, 0.05, TierConfig({"hi": 1}), grid)


def test_node_tiers_zero_profile_lowest():
    grid = GridSpec((2, 2, 2), ("a", "b", "c"))
    t = TierConfig({"a": 1, "b": 2, "c": 3})
    assert t.node_tiers(np.array([[0, 1, 1], [1, 0, 1], [0, 0, 0], [0, 0, 1]]), grid).tolist() == [2, 1, 3, 3]


def _ds(X, y, levels=None):
    X = np.asarray(X)
    levels = levels or (int(X.max()) + 1,) * X.shape[1]
    return EncodedDataset(GridSpec(levels, tuple(f"i{j}" for j in range(X.shape[1]))), X, y)


def test_marginal_risk_ratio_toy():
    # exposed: 1 of 2 cases; unexposed: 1 of 4
    X = [[1], [2], [0], [0], [0], [0]]
    y = [1, 0, 1, 0, 0, 0]
    assert marginal_risk_ratio(0, _ds(X, y, (3,))) == pytest.approx(2.0)
    assert marginal_risk_ratio(0, _ds([[1], [0]], [1, 1], (2,))) == 1.0
    assert marginal_risk_ratio(0, _ds([[1], [0]], [1, 0], (2,))) == math.inf
    with pytest.raises(UndefinedResultError):
        marginal_risk_ratio(0, _ds([[1], [1]], [1, 0], (2,)))


def test_marginal_risk_ratio_matches_counts():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 3, size=(500, 4))
    y = rng.integers(0, 2, size=500)
    data = _ds(X, y, (3,) * 4)
    for j in range(4):
        e = X[:, j] >= 1
        want = (y[e].sum() / e.sum()) / (y[~e].sum() / (~e).sum())
        assert marginal_risk_ratio(j, data) == pytest.approx(want, rel=1e-12)


def test_mh_single_stratum_closed_form():
    # two items only: one stratum
    X = np.array([[1, 0]] * 30 + [[0, 1]] * 40 + [[1, 1]] * 5)
    y = np.array([1] * 12 + [0] * 18 + [1] * 8 + [0] * 32 + [1] * 5)
    p = conditional_dominance_test(0, 1, _ds(X, y, (2, 2)))
    n1, n0, m1, N = 30, 40, 20, 70
    E = n1 * m1 / N
    V = n1 * n0 * m1 * (N - m1) / (N * N * (N - 1))
    assert p == pytest.approx(norm.sf((12 - E) / math.sqrt(V)), rel=1e-12)


def test_mh_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.stats.contingency_tables")
    rng = np.random.default_rng(11)
    X = rng.integers(0, 2, size=(3000, 4))
    y = (rng.uniform(size=3000) < 0.2 + 0.1 * X[:, 0]).astype(int)
    p = conditional_dominance_test(0, 1, _ds(X, y, (2,) * 4))
    tables = []
    for a in (0, 1):
        for b in (0, 1):
            s = (X[:, 2] == a) & (X[:, 3] == b)
            g1 = s & (X[:, 0] == 1) & (X[:, 1] == 0)
            g0 = s & (X[:, 0] == 0) & (X[:, 1] == 1)
            tables.append([[y[g1].sum(), (1 - y[g1]).sum()], [y[g0].sum(), (1 - y[g0]).sum()]])
    st_ = sm.StratifiedTable(np.array(tables).transpose(1, 2, 0).astype(float))
    chi = st_.test_null_odds(correction=False).statistic
    assert p < 0.5
    assert norm.isf(p) == pytest.approx(math.sqrt(chi), rel=1e-9)


def test_mh_symmetric_and_errors():
    X = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1], [0, 1, 1]] * 50)
    y = np.array([1, 1, 0, 0] * 25 + [0, 0, 1, 1] * 25)
    assert conditional_dominance_test(0, 1, _ds(X, y, (2,) * 3)) == pytest.approx(0.5)
    with pytest.raises(UndefinedResultError):
        conditional_dominance_test(0, 1, _ds([[1, 1, 0], [0, 0, 1]], [1, 0], (2,) * 3))
    with pytest.raises(InputError):
        conditional_dominance_test(1, 1, _ds(X, y, (2,) * 3))


def test_mh_null_uniform():
    from scipy.stats import kstest

    rng = np.random.default_rng(2024)
    ps = []
    for _ in range(300):
        X = rng.integers(0, 2, size=(5000, 4))
        y = (rng.uniform(size=5000) < 0.3).astype(int)
        ps.append(conditional_dominance_test(0, 1, _ds(X, y, (2,) * 4)))
    assert kstest(ps, "uniform").statistic <= 0.08


def test_derive_tiers():
    rng = np.random.default_rng(5)
    X = rng.integers(0, 2, size=(4000, 6))
    logit = -2 + X @ np.array([2.0, 0.1, 1.5, 0.0, 1.0, 0.5])
    y = (rng.uniform(size=4000) < 1 / (1 + np.exp(-logit))).astype(int)
    t = derive_tiers(_ds(X, y, (2,) * 6), n_tiers=3)
    assert t.item_tiers["i0"] == 1 and t.item_tiers["i2"] == 1
    assert t.item_tiers["i3"] == 3
    t = derive_tiers(_ds(X, y, (2,) * 6), sizes=[1, 2, 3])
    assert [t.item_tiers[f"i{j}"] for j in range(6)].count(1) == 1
