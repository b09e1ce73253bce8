"""Simulation harness: latent frequency DGP, oracle truth, regret and FWER.

Profiles are drawn item by item from fixed marginals. Outcomes follow
``logit P(Y=1|x) = b0 + s * eta0(x)`` with ``eta0`` a non-negative linear
predictor (plus an optional product term), so ``eta`` is monotone. The
scale ``s`` is calibrated so that the superlevel set ``{eta >= tau}`` carries
a chosen probability mass.

Each replication draws its stream from
``SeedSequence([seed0, n, round(100 * mass), shape_id, r])`` so results do
not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from isoturnover.coding import (
    EncodedDataset,
    ace_frequency_grid,
    apply_coding,
    binary_grid,
    coarsen_array,
)
from isoturnover.dagtest import derive_tiers
from isoturnover.errors import CalibrationError, InputError
from isoturnover.lattice import GridSpec, UpwardClosedSet
from isoturnover.metrics import confusion
from isoturnover.turnover import TurnoverConfig, screen, to_frequency, validate

SHAPES = ("main_effects", "interaction")
RESULT_COLUMNS = ("n", "target_mass", "shape", "method", "metric", "value", "replications", "seed0")

_DEFAULT_MARGINALS = {2: (0.7, 0.3), 3: (0.6, 0.25, 0.15), 5: (0.55, 0.2, 0.1, 0.1, 0.05)}
_DEFAULT_BETA = {2: 1.0, 3: 0.6, 5: 0.35}


def _default_marginal(lv: int) -> tuple:
    if lv in _DEFAULT_MARGINALS:
        return _DEFAULT_MARGINALS[lv]
    return tuple(np.full(lv, 1.0 / lv))


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process. ``None`` fields take the built-in defaults."""

    grid: GridSpec = field(default_factory=ace_frequency_grid)
    marginals: tuple | None = None
    shape: str = "main_effects"
    beta: tuple | None = None
    gamma: float = 0.5
    b0: float = float(logit(0.10))
    tau: float = 0.20
    target_mass: float = 0.5
    blue_fraction: float = 0.45
    interaction_items: tuple = (-2, -1)

    def __post_init__(self):
        g = self.grid
        marg = self.marginals or tuple(_default_marginal(lv) for lv in g.levels)
        marg = tuple(tuple(float(p) for p in m) for m in marg)
        if len(marg) != g.dim:
            raise InputError("one marginal per item is required")
        for m, lv, name in zip(marg, g.levels, g.item_names):
            if len(m) != lv or min(m) < 0 or abs(sum(m) - 1) > 1e-9:
                raise InputError(f"marginal for {name} must be {lv} probabilities summing to 1")
        beta = self.beta or tuple(_DEFAULT_BETA.get(lv, 0.5) for lv in g.levels)
        beta = tuple(float(b) for b in beta)
        if len(beta) != g.dim or min(beta) < 0:
            raise InputError("beta needs one non-negative coefficient per item")
        if self.gamma < 0:
            raise InputError("gamma must be non-negative")
        if self.shape not in SHAPES:
            raise InputError(f"shape must be one of {SHAPES}")
        if not 0 < self.tau < 1 or not 0 < self.blue_fraction < 1:
            raise InputError("tau and blue_fraction must lie in (0, 1)")
        object.__setattr__(self, "marginals", marg)
        object.__setattr__(self, "beta", beta)

    def eta0(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = X @ np.asarray(self.beta)
        if self.shape == "interaction":
            i, j = self.interaction_items
            out = out + self.gamma * X[:, i] * X[:, j]
        return out

    def profile_mass(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        mass = np.ones(X.shape[0])
        for j, m in enumerate(self.marginals):
            mass *= np.asarray(m)[X[:, j]]
        return mass


def eta(x, config: DgpConfig, scale: float):
    """``P(Y=1 | x)``; accepts one profile or an (n, d) array."""
    X = np.asarray(x)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    p = expit(config.b0 + scale * config.eta0(X))
    return float(p[0]) if single else p


def in_superlevel(X, config: DgpConfig, scale: float, tau: float | None = None) -> np.ndarray:
    """``eta(x) >= tau`` decided on the logit scale."""
    tau = config.tau if tau is None else tau
    return config.b0 + scale * config.eta0(np.atleast_2d(X)) >= logit(tau)


def superlevel_mass(config: DgpConfig, scale: float, tau: float | None = None) -> float:
    allp = config.grid.enumerate()
    return float(config.profile_mass(allp)[in_superlevel(allp, config, scale, tau)].sum())


def calibrate_scale(config: DgpConfig, tau: float | None = None, target_mass: float | None = None,
                    tol: float = 1e-6) -> float:
    """Smallest scale (to ``tol``) whose superlevel set has mass >= target.

    The mass is a nondecreasing step function of the scale, so the upper
    bracket is doubled until it reaches the target and then bisected.
    """
    tau = config.tau if tau is None else tau
    target = config.target_mass if target_mass is None else target_mass
    if not 0 < target <= 1:
        raise InputError("target mass must lie in (0, 1]")
    allp = config.grid.enumerate()
    mass = config.profile_mass(allp)
    e0 = config.eta0(allp)
    c = logit(tau) - config.b0

    def f(s):
        return mass[config.b0 + s * e0 >= logit(tau)].sum()

    if f(0.0) >= target:
        return 0.0
    # as s grows the set tends to {eta0 > 0}, or everything when c < 0
    limit = float(mass[e0 > 0].sum()) if c > 0 else 1.0
    if limit < target:
        raise CalibrationError(f"target mass {target} is unattainable; the largest reachable mass is {limit:.6g}",
                               max_mass=limit)
    hi = 1.0
    for _ in range(200):
        if f(hi) >= target:
            break
        hi *= 2
    else:
        raise CalibrationError("failed to bracket the target mass", max_mass=limit)
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class OracleTruth:
    """Truth sets and masses, aligned with ``grid.enumerate()`` order."""

    scale: float
    truth_freq: UpwardClosedSet
    truth_bin: UpwardClosedSet
    mass_freq: np.ndarray
    mass_bin: np.ndarray
    eta_freq: np.ndarray
    eta_bin: np.ndarray
    tau: float

    @property
    def null_freq(self) -> np.ndarray:
        return self.eta_freq < self.tau

    @property
    def null_bin(self) -> np.ndarray:
        return self.eta_bin < self.tau


def oracle_truth(config: DgpConfig, scale: float | None = None) -> OracleTruth:
    """Superlevel sets on both resolutions plus the induced binary masses.

    ``eta_bin`` is the mixture ``P(Y=1 | C(X)=b)``; it is the regression
    function seen by an analysis of binary-coded data.
    """
    s = calibrate_scale(config) if scale is None else scale
    g = config.grid
    allp = g.enumerate()
    mass = config.profile_mass(allp)
    sup = in_superlevel(allp, config, s)
    T = UpwardClosedSet.from_members(g, allp[sup])
    if not (T.contains_many(allp) == sup).all():
        raise InputError("superlevel set is not upward-closed; check coefficients")
    bg = binary_grid(g)
    B = coarsen_array(allp)
    bidx = bg.index(B)
    mass_bin = np.bincount(bidx, weights=mass, minlength=bg.size)
    e = eta(allp, config, s)
    with np.errstate(invalid="ignore", divide="ignore"):
        eta_bin = np.bincount(bidx, weights=mass * e, minlength=bg.size) / mass_bin
    Tb = UpwardClosedSet(bg, [tuple(int(v >= 1) for v in c) for c in T.corners])
    return OracleTruth(s, T, Tb, mass, mass_bin, e, eta_bin, config.tau)


def sample_dataset(config: DgpConfig, scale: float, n: int, seed) -> EncodedDataset:
    """``n`` rows with parts assigned by a seeded permutation (blue share exact)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = config.grid
    X = np.empty((n, g.dim), dtype=np.int64)
    for j, m in enumerate(config.marginals):
        X[:, j] = rng.choice(len(m), size=n, p=m)
    y = (rng.random(n) < eta(X, config, scale)).astype(np.int8)
    n_blue = int(round(config.blue_fraction * n))
    part = np.full(n, "red", dtype=object)
    part[rng.permutation(n)[:n_blue]] = "blue"
    return EncodedDataset(g, X, y, part.astype(str))


def average_regret(selected: UpwardClosedSet, truth: UpwardClosedSet, mass) -> float:
    """Mass of truly high-risk profiles the selection misses.

    ``mass`` is aligned with ``grid.enumerate()`` and sums to one.
    """
    if selected.grid != truth.grid:
        raise InputError("selection and truth live on different grids")
    allp = truth.grid.enumerate()
    miss = truth.contains_many(allp) & ~selected.contains_many(allp)
    return float(np.asarray(mass)[miss].sum())


def _false_inclusion(sel: UpwardClosedSet, null_mask: np.ndarray) -> bool:
    return bool((sel.contains_many(sel.grid.enumerate()) & null_mask).any())


@dataclass
class TrialResult:
    n: int
    target_mass: float
    shape: str
    replication: int
    values: dict = field(default_factory=dict)  # (method, metric) -> value


def _shape_id(shape) -> int:
    return SHAPES.index(shape)


def rep_seed(seed0: int, n: int, mass: float, shape: str, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed0), int(n), int(round(mass * 100)), _shape_id(shape), int(r)])


def _streams(ss: np.random.SeedSequence):
    data_ss, tie_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(tie_ss.generate_state(1)[0] & 0x7FFFFFFF)


def _direction_sets(screen_part, valid_part, alpha_half, tcfg, rules):
    cands = screen(screen_part, tcfg.tau, tcfg.kappa, tcfg.ordering)
    out = {}
    for name, rule, tiers in rules:
        cfg = replace(tcfg, parent_rule=rule, tiering=tiers)
        out[name] = validate(cands, valid_part, alpha_half, cfg).selection
    return out


def _part1_trial(args) -> TrialResult:
    config, truth, n, r, seed0, tcfg = args
    rng, tie = _streams(rep_seed(seed0, n, config.target_mass, config.shape, r))
    data = apply_coding(sample_dataset(config, truth.scale, n, rng), "binary")
    red, blue = data.split_part("red"), data.split_part("blue")
    tcfg = replace(tcfg, seed=tie)
    rules = [("nearest", "nearest", None), ("evidence", "evidence", None)]
    rb = _direction_sets(red, blue, tcfg.alpha_B, tcfg, rules)
    br = _direction_sets(blue, red, tcfg.alpha_R, tcfg, rules)
    res = TrialResult(n, config.target_mass, config.shape, r)
    for name, _, _ in rules:
        union = rb[name].union(br[name])
        inter = rb[name].intersection(br[name])
        res.values[(name, "regret_union")] = average_regret(union, truth.truth_bin, truth.mass_bin)
        res.values[(name, "regret_intersection")] = average_regret(inter, truth.truth_bin, truth.mass_bin)
        res.values[(name, "false_inclusion")] = float(_false_inclusion(union, truth.null_bin))
    return res


def _part2_trial(args) -> TrialResult:
    config, truth, n, r, seed0, tcfg, codings = args
    rng, tie = _streams(rep_seed(seed0, n, config.target_mass, config.shape, r))
    data = sample_dataset(config, truth.scale, n, rng)
    labels = in_superlevel(data.X, config, truth.scale)
    tcfg = replace(tcfg, seed=tie)
    res = TrialResult(n, config.target_mass, config.shape, r)
    for coding in codings:
        coded = apply_coding(data, coding)
        red, blue = coded.split_part("red"), coded.split_part("blue")
        sel = _direction_sets(blue, red, tcfg.alpha_R, tcfg, [(coding, tcfg.parent_rule, None)])[coding]
        sel = to_frequency(sel, config.grid)
        rep = confusion(sel.contains_many(data.X), labels, coding)
        for metric in ("sensitivity", "specificity", "ppv", "npv", "ppr"):
            res.values[(coding, metric)] = getattr(rep, metric)
    return res


def _tiering_trial(args) -> TrialResult:
    config, truth, n, r, seed0, tcfg, sizes = args
    rng, tie = _streams(rep_seed(seed0, n, config.target_mass, config.shape, r))
    data = sample_dataset(config, truth.scale, n, rng)
    red, blue = data.split_part("red"), data.split_part("blue")
    tiers = derive_tiers(blue, n_tiers=len(sizes), sizes=sizes)
    tcfg = replace(tcfg, seed=tie)
    rules = [("nearest", "nearest", None), ("evidence", "evidence", None),
             ("evidence_tiered", "evidence", tiers)]
    sets = _direction_sets(blue, red, tcfg.alpha_R, tcfg, rules)
    res = TrialResult(n, config.target_mass, config.shape, r)
    for name, sel in sets.items():
        res.values[(name, "regret")] = average_regret(sel, truth.truth_freq, truth.mass_freq)
        res.values[(name, "false_inclusion")] = float(_false_inclusion(sel, truth.null_freq))
    return res


def default_turnover(tau: float) -> TurnoverConfig:
    """Turnover settings for simulations: prefixes ordered by l1 distance.

    Ascending row order mixes the lowest-risk rows into every prefix, which
    under the default DGP leaves almost no power at any profile.
    """
    return TurnoverConfig(tau=tau, ordering="l1")


def _map(fn, jobs, threads: int):
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def aggregate(trials, seed0: int) -> list:
    """Per-cell mean and Monte Carlo standard error of every recorded value.

    ``false_inclusion`` is reported as ``fwer``. Undefined values (NaN) are
    left out of the mean; ``<metric>_defined`` counts the rest.
    """
    cells: dict = {}
    for t in sorted(trials, key=lambda t: (t.n, t.target_mass, _shape_id(t.shape), t.replication)):
        key = (t.n, t.target_mass, t.shape)
        for (method, metric), v in t.values.items():
            cells.setdefault(key, {}).setdefault((method, metric), []).append(v)
    rows = []
    for (n, mass, shape), vals in cells.items():
        for (method, metric), v in vals.items():
            v = np.asarray(v, dtype=float)
            ok = v[~np.isnan(v)]
            reps = int(v.size)
            name = "fwer" if metric == "false_inclusion" else metric
            mean = float(ok.mean()) if ok.size else math.nan
            se = float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else math.nan
            base = {"n": n, "target_mass": mass, "shape": shape, "method": method,
                    "replications": reps, "seed0": seed0}
            rows.append({**base, "metric": name, "value": mean})
            rows.append({**base, "metric": f"{name}_se", "value": se})
            if ok.size != v.size:
                rows.append({**base, "metric": f"{name}_defined", "value": float(ok.size)})
    return rows


def _cells(config: DgpConfig, ns, masses, shapes):
    for shape in shapes:
        for mass in masses:
            cfg = replace(config, shape=shape, target_mass=mass)
            truth = oracle_truth(cfg)
            for n in ns:
                yield cfg, truth, int(n)


def run_part1(ns=(10_000,), masses=(0.5,), shapes=SHAPES, replications: int = 100, seed0: int = 0,
              config: DgpConfig | None = None, turnover: TurnoverConfig | None = None,
              threads: int = 1, return_trials: bool = False):
    """Binary coding in both directions; nearest vs evidence-guided parents."""
    config = config or DgpConfig()
    tcfg = turnover or default_turnover(config.tau)
    jobs = [(cfg, truth, n, r, seed0, tcfg)
            for cfg, truth, n in _cells(config, ns, masses, shapes) for r in range(replications)]
    trials = _map(_part1_trial, jobs, threads)
    rows = aggregate(trials, seed0)
    return (rows, trials) if return_trials else rows


def run_part2(ns=(20_000,), masses=(0.5,), shapes=("main_effects",), replications: int = 100,
              seed0: int = 0, config: DgpConfig | None = None, turnover: TurnoverConfig | None = None,
              codings=("score", "binary", "frequency"), threads: int = 1, return_trials: bool = False):
    """Blue-to-red screening under each coding, scored row by row against the oracle label."""
    config = config or DgpConfig()
    tcfg = turnover or default_turnover(config.tau)
    jobs = [(cfg, truth, n, r, seed0, tcfg, tuple(codings))
            for cfg, truth, n in _cells(config, ns, masses, shapes) for r in range(replications)]
    trials = _map(_part2_trial, jobs, threads)
    rows = aggregate(trials, seed0)
    return (rows, trials) if return_trials else rows


def run_tiering_experiment(ns=(10_000,), masses=(0.5,), shapes=("main_effects",), replications: int = 100,
                           seed0: int = 0, config: DgpConfig | None = None,
                           turnover: TurnoverConfig | None = None, tier_sizes=(3, 4, 3),
                           threads: int = 1, return_trials: bool = False):
    """Blue-to-red, frequency coding: nearest, evidence, evidence with tiers."""
    config = config or DgpConfig()
    tcfg = turnover or default_turnover(config.tau)
    if sum(tier_sizes) != config.grid.dim:
        raise InputError("tier sizes must add up to the number of items")
    jobs = [(cfg, truth, n, r, seed0, tcfg, tuple(tier_sizes))
            for cfg, truth, n in _cells(config, ns, masses, shapes) for r in range(replications)]
    trials = _map(_tiering_trial, jobs, threads)
    rows = aggregate(trials, seed0)
    return (rows, trials) if return_trials else rows


def _null_trial(args) -> bool:
    grid, eta_table, n, r, seed0, tcfg = args
    ss = np.random.SeedSequence([int(seed0), int(n), int(r)])
    rng, tie = _streams(ss)
    allp = grid.enumerate()
    X = allp[rng.integers(0, allp.shape[0], size=n)]
    y = (rng.random(n) < eta_table[grid.index(X)]).astype(np.int8)
    part = np.where(rng.permutation(n) < int(round(0.45 * n)), "blue", "red")
    data = EncodedDataset(grid, X, y, part)
    cfg = replace(tcfg, seed=tie, coding_red_to_blue="frequency", coding_blue_to_red="frequency")
    red, blue = data.split_part("red"), data.split_part("blue")
    sel_rb = _direction_sets(red, blue, cfg.alpha_B, cfg, [("s", cfg.parent_rule, None)])["s"]
    sel_br = _direction_sets(blue, red, cfg.alpha_R, cfg, [("s", cfg.parent_rule, None)])["s"]
    return not sel_rb.union(sel_br).is_empty()


def run_null_fwer(replications: int = 500, n: int = 2_000, seed0: int = 0, levels=(3, 3),
                  eta_table=None, turnover: TurnoverConfig | None = None, threads: int = 1) -> float:
    """Fraction of runs with any selection when every profile has ``eta < tau``.

    The default surface is flat just below ``tau``, the least favourable null.
    """
    tcfg = turnover or default_turnover(0.2)
    grid = GridSpec(tuple(levels), tuple(f"item{j + 1}" for j in range(len(levels))))
    if eta_table is None:
        eta_table = np.full(grid.size, tcfg.tau * (1 - 1e-3))
    eta_table = np.asarray(eta_table, dtype=float)
    if eta_table.shape != (grid.size,) or (eta_table >= tcfg.tau).any():
        raise InputError("eta_table must give one value below tau per grid cell")
    jobs = [(grid, eta_table, n, r, seed0, tcfg) for r in range(replications)]
    return float(np.mean(_map(_null_trial, jobs, threads)))


def results_to_csv(rows, path=None) -> str:
    """Write result rows with the fixed column order; returns the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        v = r["value"]
        w.writerow({**r, "value": "" if isinstance(v, float) and math.isnan(v) else repr(float(v))})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def lookup(rows, method: str, metric: str, **cell) -> float:
    """Value of one (method, metric) in a result table, filtered by cell keys."""
    for r in rows:
        if r["method"] == method and r["metric"] == metric and all(r[k] == v for k, v in cell.items()):
            return r["value"]
    raise KeyError((method, metric, cell))
