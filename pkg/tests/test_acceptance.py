"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

A summary line per criterion is printed at the end of the pytest run.
"""

import math
import time
from pathlib import Path

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy import integrate

from _fixtures import (
    BIN_CORNERS,
    BINARY_COVERED,
    CUTOFF7,
    FREQ_CORNERS,
    FREQ_GRID_SIZE,
    LIFTED_COVERED,
    REAL_DATA_COUNTS,
    RELATIVE_GAIN_PCT,
    REP_COVERED,
    SUBGROUP,
)
from isoturnover.coding import EncodedDataset, ace_binary_grid, ace_frequency_grid, coarsen_array
from isoturnover.dagtest import HypothesisSet, build_polyforest_evidence, build_polyforest_nearest, dag_test
from isoturnover.lattice import GridSpec, UpwardClosedSet, closure_count, lift, minimal_corners
from isoturnover.metrics import ScreeningReport, matched_specificity_compare
from isoturnover.pvalue import log_ratio, pvalue_from_responses
from isoturnover.simulation import (
    DgpConfig,
    lookup,
    run_null_fwer,
    run_part1,
    run_part2,
    run_tiering_experiment,
)
from isoturnover.turnover import TurnoverConfig, manifest, replicable_set, run_turnover

FREQ = ace_frequency_grid()
BIN = ace_binary_grid()
REPS = 50


def test_criterion_01_closure_arithmetic(criterion):
    t0 = time.perf_counter()
    b = UpwardClosedSet(BIN, BIN_CORNERS)
    nb = closure_count(b)
    nf = closure_count(lift(b, FREQ))
    dt = time.perf_counter() - t0
    ok = (nb == BINARY_COVERED and round(100 * nb / 1024, 1) == 53.1 and nf == LIFTED_COVERED
          and FREQ.size == FREQ_GRID_SIZE and round(100 * nf / FREQ.size, 2) == 55.56 and dt < 1)
    criterion(1, ok, f"binary {nb}/1024 ({100 * nb / 1024:.1f}%), lifted {nf}/{FREQ.size} "
                     f"({100 * nf / FREQ.size:.2f}%), {dt:.3f}s")


def test_criterion_02_replicable_closure(criterion):
    t0 = time.perf_counter()
    f = UpwardClosedSet(FREQ, FREQ_CORNERS)
    rep = replicable_set(f, UpwardClosedSet(BIN, BIN_CORNERS))
    n = closure_count(f)
    n_rep = closure_count(rep)
    dt = time.perf_counter() - t0
    ok = n == REP_COVERED and n_rep == REP_COVERED and round(100 * n / FREQ.size, 2) == 19.03 and dt < 5
    criterion(2, ok, f"{n} profiles ({100 * n / FREQ.size:.2f}%), Rep {n_rep}, {dt:.3f}s")


def _quad_ratio(S, k, tau):
    a, b = k - S + 1, S + 1
    val, _ = integrate.quad(lambda t: t ** (a - 1) * (1 - t) ** (b - 1), 0, 1 - tau,
                            epsabs=0, epsrel=1e-13, limit=500)
    return math.log(tau) * S + math.log1p(-tau) * a - math.log(val)


def test_criterion_03_pvalue_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    where = None
    for tau in (0.1, 0.172, 0.2, 0.5, 0.9):
        for k in range(0, 51):
            S = np.arange(k + 1)
            got = log_ratio(S, np.full(k + 1, k), tau)
            for s in range(k + 1):
                err = abs(math.expm1(float(got[s]) - _quad_ratio(s, k, tau)))
                if err > worst:
                    worst, where = err, (tau, k, s)
    dt = time.perf_counter() - t0
    criterion(3, worst <= 1e-9 and dt < 30, f"max relative error {worst:.2e} at (tau, k, S)={where}, {dt:.1f}s")


def test_criterion_04_anytime_validity(criterion):
    rng = np.random.default_rng(20240604)
    R, tau = 10_000, 0.172
    lines, ok = [], True
    for n in (10, 100):
        Y = rng.random((R, n)) < tau
        p = np.array([pvalue_from_responses(y, tau).value for y in Y])
        for alpha in (0.01, 0.05):
            rate = float((p <= alpha).mean())
            bound = alpha + 3 * math.sqrt(alpha * (1 - alpha) / R)
            ok &= rate <= bound
            lines.append(f"n={n} a={alpha}: {rate:.4f}<={bound:.4f}")
    criterion(4, ok, "; ".join(lines))


def test_criterion_05_null_fwer(criterion):
    t0 = time.perf_counter()
    fwer = run_null_fwer(replications=500, n=2_000, seed0=5)
    bound = 0.05 + 3 * math.sqrt(0.05 * 0.95 / 500)
    dt = time.perf_counter() - t0
    criterion(5, fwer <= bound and dt < 600, f"FWER {fwer:.4f} <= {bound:.4f} on 3x3 null, 500 reps, {dt:.0f}s")


def test_criterion_06_part1_ordering(criterion):
    t0 = time.perf_counter()
    rows = run_part1(ns=(10_000,), masses=(0.5,), replications=REPS, seed0=0)
    dt = time.perf_counter() - t0
    ok = dt < 1800
    parts = []
    for shape in ("main_effects", "interaction"):
        for metric in ("regret_union", "regret_intersection"):
            ev = lookup(rows, "evidence", metric, shape=shape)
            ne = lookup(rows, "nearest", metric, shape=shape)
            ok &= ev <= ne
            parts.append(f"{shape}/{metric.split('_')[1]}: ev {ev:.5f} vs nn {ne:.5f}")
        for method in ("nearest", "evidence"):
            f = lookup(rows, method, "fwer", shape=shape)
            ok &= f <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / REPS)
    criterion(6, ok, "; ".join(parts) + f"; {dt:.0f}s")


def test_criterion_07_part2_ordering(criterion):
    t0 = time.perf_counter()
    rows = run_part2(ns=(20_000,), masses=(0.5,), shapes=("main_effects",), replications=REPS, seed0=0)
    dt = time.perf_counter() - t0
    ok = dt < 1800
    parts = []
    for metric in ("specificity", "ppv"):
        f, b, s = (lookup(rows, c, metric) for c in ("frequency", "binary", "score"))
        ok &= f >= b >= s
        parts.append(f"{metric}: freq {f:.4f} >= bin {b:.4f} >= score {s:.4f}")
    criterion(7, ok, "; ".join(parts) + f"; {dt:.0f}s")


def test_criterion_08_tiering(criterion):
    t0 = time.perf_counter()
    rows = run_tiering_experiment(ns=(10_000,), masses=(0.5,), shapes=("main_effects",),
                                  replications=REPS, seed0=0)
    dt = time.perf_counter() - t0
    ev, evt, nn = (lookup(rows, m, "regret") for m in ("evidence", "evidence_tiered", "nearest"))
    se = math.hypot(lookup(rows, "evidence", "regret_se"), lookup(rows, "evidence_tiered", "regret_se"))
    fw = max(lookup(rows, m, "fwer") for m in ("evidence", "evidence_tiered", "nearest"))
    ok = abs(ev - evt) <= 2 * se and ev <= nn and evt <= nn and dt < 1200
    ok &= fw <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / REPS)
    criterion(8, ok, f"ev {ev:.6f}, tiered {evt:.6f} (|diff| {abs(ev - evt):.2e} <= 2se {2 * se:.2e}), "
                     f"nearest {nn:.6f}, max FWER {fw:.3f}, {dt:.0f}s")


grids = st.lists(st.integers(2, 4), min_size=1, max_size=4).map(
    lambda lv: GridSpec(tuple(lv), tuple(f"i{j}" for j in range(len(lv)))))


@st.composite
def grid_and_members(draw):
    g = draw(grids)
    allp = g.enumerate()
    mask = draw(st.lists(st.booleans(), min_size=g.size, max_size=g.size))
    return g, allp[np.array(mask, dtype=bool)]


@settings(max_examples=60, deadline=None)
@given(grid_and_members())
def _round_trip(gm):
    g, M = gm
    ucs = UpwardClosedSet.from_members(g, M)
    closure = ucs.members()
    again = UpwardClosedSet(g, minimal_corners([tuple(r) for r in closure]))
    assert again == ucs
    assert closure_count(ucs) == len(closure) == int(ucs.contains_many(g.enumerate()).sum())
    for m in M:
        assert tuple(m) in ucs


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(*(st.integers(0, 1) for _ in range(10))), max_size=4),
       st.lists(st.tuples(*(st.integers(0, lv - 1) for lv in FREQ.levels)), min_size=2, max_size=2))
def _coarsen_lift_monotone(corners, pair):
    x, y = (np.array(p) for p in pair)
    z = np.maximum(x, y)
    cz, cx = coarsen_array(z[None, :])[0], coarsen_array(x[None, :])[0]
    assert (cz >= cx).all()
    L = lift(UpwardClosedSet(BIN, corners), FREQ)
    if tuple(x) in L:
        assert tuple(z) in L
    assert (tuple(x) in L) == (tuple(int(v) for v in cx) in UpwardClosedSet(BIN, corners))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["nearest", "evidence"]))
def _rejections_closed(seed, rule):
    rng = np.random.default_rng(seed)
    g = GridSpec((3, 3, 2), ("a", "b", "c"))
    allp = g.enumerate()
    P = allp[rng.random(g.size) < 0.6]
    if P.shape[0] == 0:
        return
    pv = np.where(rng.random(P.shape[0]) < 0.5, rng.uniform(1e-6, 0.01, P.shape[0]), rng.uniform(0.01, 1, P.shape[0]))
    hyps = HypothesisSet(P, p_valid=pv, p_screen=rng.uniform(0, 0.03, P.shape[0]))
    build = build_polyforest_evidence if rule == "evidence" else build_polyforest_nearest
    res = dag_test(hyps, build(hyps, g, seed), 0.05, g)
    rej = res.rejected
    for i in np.flatnonzero(rej):
        above = (P >= P[i]).all(axis=1)
        assert rej[above].all()


def _thread_determinism():
    rng = np.random.default_rng(1)
    g = GridSpec((3, 3, 2, 2), tuple("abcd"))
    X = np.column_stack([rng.integers(0, lv, 3000) for lv in g.levels])
    y = (rng.random(3000) < 0.05 + 0.08 * X.sum(axis=1)).astype(int)
    data = EncodedDataset(g, X, y, np.where(rng.random(3000) < 0.45, "blue", "red"))
    cfg = TurnoverConfig(tau=0.2, coding_red_to_blue="frequency", ordering="l1", seed=3)
    assert manifest(run_turnover(data, cfg)) == manifest(run_turnover(data, cfg, threads=2))
    small = DgpConfig(grid=GridSpec((3, 3, 3, 2), tuple("abcd")), target_mass=0.5)
    assert run_part1(ns=(1500,), replications=3, config=small) == \
        run_part1(ns=(1500,), replications=3, config=small, threads=2)


def test_criterion_09_property_suites(criterion):
    t0 = time.perf_counter()
    failures = []
    for name, fn in [("round-trip", _round_trip), ("coarsen/lift", _coarsen_lift_monotone),
                     ("upward-closed rejections", _rejections_closed), ("thread determinism", _thread_determinism)]:
        try:
            fn()
        except Exception as exc:  # report every failing suite, not just the first
            failures.append(f"{name}: {type(exc).__name__}")
    dt = time.perf_counter() - t0
    criterion(9, not failures and dt < 300, ("all green" if not failures else "; ".join(failures)) + f", {dt:.0f}s")


def test_criterion_10_real_data_fixtures_only(criterion):
    c = REAL_DATA_COUNTS
    checks = [
        round(100 - 100 * c["screened_candidates"] / FREQ_GRID_SIZE, 1) == c["screened_reduction_pct"],
        round(100 * c["flagged_binary"] / c["n_respondents"], 1) == c["flagged_binary_pct"],
        c["flagged_replicable"] < c["flagged_binary"],
    ]
    cut = ScreeningReport("ACE score >= 7", 19, 5, 81, 95)
    sub = ScreeningReport("subgroup", 24, 5, 76, 95)
    cmp_ = matched_specificity_compare([cut, sub])
    checks.append(round(100 * cmp_.relative_gain) == RELATIVE_GAIN_PCT)
    checks.append(round(cut.sensitivity, 2) == CUTOFF7["sensitivity"] and round(sub.sensitivity, 2) == SUBGROUP["sensitivity"])
    # manifest exposes a field for every published count
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.integers(0, lv, 400) for lv in FREQ.levels])
    data = EncodedDataset(FREQ, X, rng.integers(0, 2, 400), np.where(rng.random(400) < 0.45, "blue", "red"))
    m = manifest(run_turnover(data, TurnoverConfig()))
    d = m["directions"]["red_to_blue"]
    checks.append(all(k in d for k in ("rejected_before_closure", "screened", "reduction_vs_grid_pct", "flagged_rows")))
    checks.append("flagged_rows" in m["replicable"])
    root = Path(__file__).resolve().parents[1]
    shipped = [p for p in root.rglob("*") if "brfss" in p.name.lower() and p.suffix.lower() in (".csv", ".xpt", ".sas7bdat")]
    checks.append(not shipped)
    criterion(10, all(checks), "BRFSS-dependent values checked as fixtures and output fields only; "
                               "microdata not shipped, so 77 / 4,616 / 9,842 / 4,364 and Table 5 rows are not recomputed")
