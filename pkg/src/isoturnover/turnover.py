"""Two-part data turnover: screen in one part, validate in the other.

Direction ``red_to_blue`` screens on the red part and validates on the blue
part at ``alpha_B``; ``blue_to_red`` does the reverse at ``alpha_R``. Each
direction may use its own coding. The two selections are then combined at
frequency resolution into a replicable set (both parts agree) and a global
set (either part).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from isoturnover.coding import CODINGS, EncodedDataset, apply_coding, score_selection
from isoturnover.dagtest import (
    HypothesisSet,
    Polyforest,
    RejectionResult,
    TierConfig,
    build_polyforest_evidence,
    build_polyforest_nearest,
    dag_test,
    dag_test_tiered,
)
from isoturnover.errors import InputError
from isoturnover.lattice import GridSpec, UpwardClosedSet, closure_count, lift
from isoturnover.pvalue import ORDERINGS, iss_pvalues

PARENT_RULES = ("nearest", "evidence")


@dataclass
class TurnoverConfig:
    tau: float = 0.172
    alpha: float = 0.05
    kappa: float | None = None
    alpha_R: float | None = None
    alpha_B: float | None = None
    parent_rule: str = "evidence"
    coding_red_to_blue: str = "binary"
    coding_blue_to_red: str = "frequency"
    tiering: TierConfig | None = None
    seed: int = 0
    ordering: str = "row"
    red_label: str = "red"
    blue_label: str = "blue"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InputError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.kappa is None:
            self.kappa = self.alpha / 2
        if self.alpha_R is None:
            self.alpha_R = self.alpha / 2
        if self.alpha_B is None:
            self.alpha_B = self.alpha / 2
        if not 0.0 < self.kappa < 1.0:
            raise InputError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.alpha_R <= 0 or self.alpha_B <= 0:
            raise InputError("alpha_R and alpha_B must be positive")
        if self.alpha_R + self.alpha_B > self.alpha * (1 + 1e-12):
            raise InputError("alpha_R + alpha_B must not exceed alpha")
        if self.parent_rule not in PARENT_RULES:
            raise InputError(f"parent_rule must be one of {PARENT_RULES}")
        for c in (self.coding_red_to_blue, self.coding_blue_to_red):
            if c not in CODINGS:
                raise InputError(f"coding must be one of {CODINGS}, got {c!r}")
        if self.ordering not in ORDERINGS:
            raise InputError(f"ordering must be one of {ORDERINGS}")
        if self.seed < 0:
            raise InputError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.tiering is not None:
            d["tiering"] = {"item_tiers": dict(self.tiering.item_tiers),
                            "tier_weights": None if self.tiering.tier_weights is None
                            else list(self.tiering.tier_weights)}
        return d


@dataclass
class DirectionResult:
    name: str
    coding: str
    grid: GridSpec
    screened: HypothesisSet
    forest: Polyforest
    test: RejectionResult
    selection: UpwardClosedSet
    n_observed_profiles: int = 0
    flagged: int = 0
    n_rows: int = 0

    @property
    def rejected(self) -> np.ndarray:
        return self.screened.profiles[self.test.rejected]

    @property
    def n_screened(self) -> int:
        return self.screened.m

    @property
    def n_rejected(self) -> int:
        return self.test.n_rejected

    @property
    def coverage(self) -> float:
        return self.selection.coverage()


@dataclass
class TurnoverResult:
    dir_red_to_blue: DirectionResult
    dir_blue_to_red: DirectionResult
    replicable: UpwardClosedSet
    global_: UpwardClosedSet
    config: TurnoverConfig
    flagged: dict = field(default_factory=dict)
    n_rows: int = 0


def screen(part: EncodedDataset, tau: float, kappa: float, ordering: str = "row") -> HypothesisSet:
    """Distinct observed profiles of ``part`` whose p-value is at most ``kappa``."""
    U = part.distinct_profiles() if part.n else np.zeros((0, part.grid.dim), dtype=np.int64)
    if U.shape[0] == 0:
        return HypothesisSet(U.reshape(0, part.grid.dim), p_screen=np.zeros(0))
    p, _, _ = iss_pvalues(U, part, tau, ordering)
    keep = p <= kappa
    return HypothesisSet(U[keep], p_screen=p[keep])


def validate(candidates: HypothesisSet, validation_part: EncodedDataset, alpha_half: float,
             config: TurnoverConfig, name: str = "direction", coding: str = "frequency") -> DirectionResult:
    """Test the candidates on the other part and close the rejections upward.

    Candidates absent from the validation part have an empty dominated sample
    there and therefore get ``p_valid = 1``.
    """
    grid = validation_part.grid
    P = candidates.profiles.reshape(-1, grid.dim)
    if P.shape[0]:
        p_valid, _, _ = iss_pvalues(P, validation_part, config.tau, config.ordering)
    else:
        p_valid = np.zeros(0)
    hyps = HypothesisSet(P, p_valid=p_valid, p_screen=candidates.p_screen)
    if config.parent_rule == "evidence":
        forest = build_polyforest_evidence(hyps, grid, config.seed)
    else:
        forest = build_polyforest_nearest(hyps, grid, config.seed)
    if config.tiering is not None and coding != "score":
        test = dag_test_tiered(hyps, forest, alpha_half, config.tiering, grid)
    else:
        test = dag_test(hyps, forest, alpha_half, grid)
    selection = UpwardClosedSet(grid, [tuple(int(v) for v in r) for r in P[test.rejected]])
    return DirectionResult(name, coding, grid, hyps, forest, test, selection)


def to_frequency(selection: UpwardClosedSet, freq_grid: GridSpec) -> UpwardClosedSet:
    """Express a binary, frequency or score selection on the frequency grid."""
    g = selection.grid
    if g.same_items(freq_grid) and tuple(g.levels) == tuple(freq_grid.levels):
        return UpwardClosedSet(freq_grid, selection.corners)
    if g.same_items(freq_grid) and all(lv == 2 for lv in g.levels):
        return lift(selection, freq_grid)
    if g.dim == 1 and g.levels[0] == freq_grid.dim + 1:
        z0 = min((c[0] for c in selection.corners), default=None)
        return score_selection(z0, freq_grid)
    raise InputError(f"items {g.item_names} do not match {freq_grid.item_names}")


def replicable_set(freq_sel: UpwardClosedSet, bin_sel: UpwardClosedSet) -> UpwardClosedSet:
    """Profiles in ``freq_sel`` whose collapsed form lies in ``bin_sel``."""
    return freq_sel.intersection(to_frequency(bin_sel, freq_sel.grid))


def global_set(freq_sel: UpwardClosedSet, bin_sel: UpwardClosedSet) -> UpwardClosedSet:
    """Profiles in ``freq_sel`` or whose collapsed form lies in ``bin_sel``."""
    return freq_sel.union(to_frequency(bin_sel, freq_sel.grid))


def flag_fraction(selection: UpwardClosedSet, data: EncodedDataset) -> tuple:
    """Number and fraction of rows of ``data`` whose profile is selected."""
    if data.n == 0:
        return 0, 0.0
    count = int(selection.contains_many(data.X).sum())
    return count, count / data.n


def _direction(name, screen_part, valid_part, coding, alpha_half, config):
    s = apply_coding(screen_part, coding)
    v = apply_coding(valid_part, coding)
    cands = screen(s, config.tau, config.kappa, config.ordering)
    res = validate(cands, v, alpha_half, config, name=name, coding=coding)
    res.n_observed_profiles = int(np.unique(s.X, axis=0).shape[0]) if s.n else 0
    return res


def run_turnover(data: EncodedDataset, config: TurnoverConfig | None = None,
                 threads: int = 1) -> TurnoverResult:
    """Full protocol on a frequency-coded dataset carrying part labels."""
    config = config or TurnoverConfig()
    red = data.split_part(config.red_label)
    blue = data.split_part(config.blue_label)
    jobs = [
        ("red_to_blue", red, blue, config.coding_red_to_blue, config.alpha_B),
        ("blue_to_red", blue, red, config.coding_blue_to_red, config.alpha_R),
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as ex:
            rb, br = ex.map(lambda j: _direction(*j, config), jobs)
    else:
        rb, br = (_direction(*j, config) for j in jobs)
    for d in (rb, br):
        d.flagged, d.n_rows = flag_fraction(d.selection, apply_coding(data, d.coding))[0], data.n
    freq_br = to_frequency(br.selection, data.grid)
    freq_rb = to_frequency(rb.selection, data.grid)
    rep = freq_br.intersection(freq_rb)
    glob = freq_br.union(freq_rb)
    flagged = {
        "replicable": flag_fraction(rep, data)[0],
        "global": flag_fraction(glob, data)[0],
    }
    return TurnoverResult(rb, br, rep, glob, config, flagged, data.n)


def _pct(num, den):
    return None if den == 0 else 100.0 * num / den


def _set_summary(sel: UpwardClosedSet, flagged: int, n_rows: int) -> dict:
    size = closure_count(sel)
    return {
        "corners": [list(c) for c in sel.corners],
        "n_corners": len(sel.corners),
        "covered_profiles": size,
        "grid_size": sel.grid.size,
        "coverage_pct": _pct(size, sel.grid.size),
        "flagged_rows": flagged,
        "flagged_pct": _pct(flagged, n_rows),
    }


def manifest(result: TurnoverResult) -> dict:
    """JSON-ready run summary. Screened counts carry both denominators."""
    out = {"config": result.config.to_dict(), "n_rows": result.n_rows, "directions": {}}
    for d in (result.dir_red_to_blue, result.dir_blue_to_red):
        entry = {
            "coding": d.coding,
            "grid": d.grid.to_dict(),
            "screened": d.n_screened,
            "observed_profiles": d.n_observed_profiles,
            "screened_pct_of_observed": _pct(d.n_screened, d.n_observed_profiles),
            "screened_pct_of_grid": _pct(d.n_screened, d.grid.size),
            "reduction_vs_grid_pct": None if d.grid.size == 0 else 100.0 - _pct(d.n_screened, d.grid.size),
            "rejected_before_closure": d.n_rejected,
            "rounds": len(d.test.rounds),
        }
        entry.update(_set_summary(d.selection, d.flagged, d.n_rows))
        out["directions"][d.name] = entry
    out["replicable"] = _set_summary(result.replicable, result.flagged["replicable"], result.n_rows)
    out["global"] = _set_summary(result.global_, result.flagged["global"], result.n_rows)
    return _clean(out)


def _clean(obj):
    # plain JSON types; non-finite floats become None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj
