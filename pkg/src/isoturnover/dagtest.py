"""DAG multiple testing over ordered hypotheses.

Hypothesis ``i`` tests ``eta(x_i) < tau``. If ``x_i <= x_j`` then rejecting
``i`` logically implies rejecting ``j``, so rejections always propagate upward
to every dominating profile. Alpha is routed through a polyforest in which
each node keeps at most one parent, a strict dominator chosen among its covers.

Each round gives every current root the share of ``alpha`` proportional to
its number of leaf descendants, rejects roots whose p-value fits the share,
propagates, deletes rejected nodes (their children become roots) and repeats
until a round rejects nothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from isoturnover.coding import EncodedDataset
from isoturnover.errors import InputError, UndefinedResultError
from isoturnover.lattice import GridSpec, cover_matrix, strict_dominance_matrix


@dataclass
class HypothesisSet:
    """Distinct profiles with validation and (optionally) screening p-values."""

    profiles: np.ndarray
    p_valid: np.ndarray | None = None
    p_screen: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.profiles, dtype=np.int64)
        if P.ndim == 1:
            P = P.reshape(-1, 1) if P.size else P.reshape(0, 0)
        self.profiles = P
        if P.shape[0] and np.unique(P, axis=0).shape[0] != P.shape[0]:
            raise InputError("hypothesis profiles must be distinct")
        for name in ("p_valid", "p_screen"):
            p = getattr(self, name)
            if p is None:
                continue
            p = np.asarray(p, dtype=float).ravel()
            if p.shape[0] != P.shape[0]:
                raise InputError(f"{name} has {p.shape[0]} entries for {P.shape[0]} hypotheses")
            if p.size and ((p <= 0) | (p > 1) | np.isnan(p)).any():
                raise InputError(f"{name} values must lie in (0, 1]")
            setattr(self, name, p)

    @property
    def m(self) -> int:
        return int(self.profiles.shape[0])

    def profile(self, i: int) -> tuple:
        return tuple(int(v) for v in self.profiles[i])


@dataclass(frozen=True)
class Polyforest:
    """``parent[i]`` is the index of node ``i``'s parent, or -1 for a root."""

    parent: np.ndarray

    @property
    def m(self) -> int:
        return int(self.parent.shape[0])

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parent < 0)

    def children(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.parent == i)

    def validate(self, profiles: np.ndarray) -> None:
        """Raise InputError unless every parent strictly dominates its child."""
        P = np.asarray(profiles)
        for i, p in enumerate(self.parent):
            if p < 0:
                continue
            if p == i or not (P[p] >= P[i]).all() or (P[p] == P[i]).all():
                raise InputError(f"parent {p} does not strictly dominate node {i}")


@dataclass(frozen=True)
class TierConfig:
    """Priority tier (1 = highest) per item, plus optional per-tier weights."""

    item_tiers: Mapping
    tier_weights: tuple | None = None

    @property
    def n_tiers(self) -> int:
        return max(self.item_tiers.values()) if self.item_tiers else 1

    def weights(self) -> np.ndarray:
        if self.tier_weights is None:
            return np.ones(self.n_tiers)
        w = np.asarray(self.tier_weights, dtype=float)
        if w.shape[0] < self.n_tiers or (w <= 0).any():
            raise InputError("tier_weights needs one positive weight per tier")
        return w

    def item_tier_vector(self, grid: GridSpec) -> np.ndarray:
        missing = [n for n in grid.item_names if n not in self.item_tiers]
        if missing:
            raise InputError(f"items without a tier assignment: {missing}")
        tiers = np.array([int(self.item_tiers[n]) for n in grid.item_names])
        if (tiers < 1).any():
            raise InputError("tiers are numbered from 1")
        return tiers

    def node_tiers(self, profiles: np.ndarray, grid: GridSpec) -> np.ndarray:
        """Minimum tier over positive items; the all-zero profile gets the last tier."""
        t = self.item_tier_vector(grid)
        P = np.asarray(profiles)
        masked = np.where(P >= 1, t[None, :], self.n_tiers)
        return masked.min(axis=1) if P.shape[0] else np.zeros(0, dtype=int)


@dataclass
class RoundRecord:
    index: int
    roots: list
    budgets: list
    p_values: list
    rejected_roots: list
    propagated: list


@dataclass
class RejectionResult:
    """Rejected hypotheses (as a boolean mask) and the per-round audit trail."""

    rejected: np.ndarray
    rounds: list = field(default_factory=list)

    @property
    def rejected_indices(self) -> np.ndarray:
        return np.flatnonzero(self.rejected)

    @property
    def n_rejected(self) -> int:
        return int(self.rejected.sum())

    def to_dict(self, hyps: HypothesisSet | None = None) -> dict:
        def node(i):
            return {"node": int(i), "profile": list(hyps.profile(i))} if hyps is not None else int(i)

        return {
            "n_rejected": self.n_rejected,
            "rejected": [node(i) for i in self.rejected_indices],
            "rounds": [
                {
                    "round": r.index,
                    "roots": [
                        {"root": node(i), "budget": float(b), "p_value": float(p)}
                        for i, b, p in zip(r.roots, r.budgets, r.p_values)
                    ],
                    "rejected_roots": [node(i) for i in r.rejected_roots],
                    "propagated": [node(i) for i in r.propagated],
                }
                for r in self.rounds
            ],
        }

    def to_json(self, hyps: HypothesisSet | None = None) -> str:
        return json.dumps(self.to_dict(hyps), indent=2)

    def describe(self) -> str:
        """Plain-text walk-through of the rounds."""
        lines = []
        for r in self.rounds:
            parts = ", ".join(f"{i}: p={p:.4g} vs {b:.4g}" for i, b, p in zip(r.roots, r.budgets, r.p_values))
            lines.append(f"round {r.index}: roots [{parts}]")
            if r.rejected_roots:
                lines.append(f"  reject roots {list(r.rejected_roots)}; propagate to {list(r.propagated)}")
            else:
                lines.append("  no rejection; stop")
        return "\n".join(lines)


def _tie_rng(seed: int, profile) -> np.random.Generator:
    # One stream per (seed, node) keeps tie-breaks independent of visiting order.
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(v) for v in profile)])


def _pick(cands: np.ndarray, keys: np.ndarray, P: np.ndarray, node: int, seed: int) -> int:
    best = keys.min()
    tied = cands[keys == best]
    if tied.size == 1:
        return int(tied[0])
    order = np.lexsort(P[tied].T[::-1])
    tied = tied[order]
    return int(tied[_tie_rng(seed, P[node]).integers(tied.size)])


def _build(hyps: HypothesisSet, seed: int, key_fn) -> Polyforest:
    P = hyps.profiles
    m = hyps.m
    parent = np.full(m, -1, dtype=np.int64)
    if m == 0:
        return Polyforest(parent)
    K = cover_matrix(P, strict_dominance_matrix(P))
    for i in range(m):
        cands = np.flatnonzero(K[:, i])
        if cands.size:
            parent[i] = _pick(cands, key_fn(i, cands), P, i, seed)
    return Polyforest(parent)


def build_polyforest_nearest(hyps: HypothesisSet, grid: GridSpec | None = None, seed: int = 0) -> Polyforest:
    """Parent = the cover closest in l-infinity distance; seeded random ties."""
    P = hyps.profiles
    if grid is not None and hyps.m:
        grid.check_array(P)
    return _build(hyps, seed, lambda i, c: np.abs(P[c] - P[i]).max(axis=1))


def build_polyforest_evidence(hyps: HypothesisSet, grid: GridSpec | None = None, seed: int = 0) -> Polyforest:
    """Parent = the cover with the smallest screening p-value; seeded random ties."""
    if hyps.p_screen is None:
        raise InputError("evidence-guided parenting needs screening p-values")
    if grid is not None and hyps.m:
        grid.check_array(hyps.profiles)
    ps = hyps.p_screen
    return _build(hyps, seed, lambda i, c: ps[c])


class _ForestState:
    """Surviving forest between rounds."""

    def __init__(self, hyps: HypothesisSet, forest: Polyforest):
        if forest.m != hyps.m:
            raise InputError(f"forest has {forest.m} nodes for {hyps.m} hypotheses")
        self.P = hyps.profiles
        self.parent = np.asarray(forest.parent, dtype=np.int64)
        self.m = hyps.m
        sums = self.P.sum(axis=1) if self.m else np.zeros(0, dtype=np.int64)
        # children have strictly smaller level sums than their parents
        self.buckets = [np.flatnonzero(sums == s) for s in np.unique(sums)]
        self.rejected = np.zeros(self.m, dtype=bool)

    def roots_and_budgets(self, alpha: float):
        active = ~self.rejected
        has_par = self.parent >= 0
        par_active = has_par & active[np.where(has_par, self.parent, 0)]
        linked = active & par_active
        n_child = np.bincount(self.parent[linked], minlength=self.m)
        leaf = active & (n_child == 0)
        counts = leaf.astype(np.int64)
        for b in self.buckets:
            b = b[linked[b]]
            if b.size:
                np.add.at(counts, self.parent[b], counts[b])
        roots = np.flatnonzero(active & ~par_active)
        total = int(leaf.sum())
        budgets = alpha * counts[roots] / total if total else np.zeros(roots.size)
        return roots, budgets

    def reject(self, new_roots: np.ndarray) -> np.ndarray:
        """Reject ``new_roots`` plus every dominating hypothesis; return the extras."""
        if new_roots.size == 0:
            return new_roots
        R = self.P[new_roots]
        open_ = np.flatnonzero(~self.rejected)
        up = np.zeros(open_.size, dtype=bool)
        for r in R:
            up |= (self.P[open_] >= r).all(axis=1)
        hit = open_[up]
        self.rejected[hit] = True
        self.rejected[new_roots] = True
        return np.setdiff1d(hit, new_roots)


def _check_alpha(alpha):
    if not 0.0 < float(alpha) < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    return float(alpha)


def dag_test(hyps: HypothesisSet, forest: Polyforest, alpha: float,
             grid: GridSpec | None = None) -> RejectionResult:
    """Iterative leaf-proportional DAG test on ``hyps.p_valid``."""
    alpha = _check_alpha(alpha)
    if hyps.p_valid is None:
        raise InputError("dag_test needs validation p-values")
    if grid is not None and hyps.m:
        grid.check_array(hyps.profiles)
    state = _ForestState(hyps, forest)
    p = hyps.p_valid
    rounds = []
    while True:
        roots, budgets = state.roots_and_budgets(alpha)
        if roots.size == 0:
            break
        hit = roots[p[roots] <= budgets]
        extra = state.reject(hit)
        rounds.append(RoundRecord(len(rounds) + 1, roots.tolist(), budgets.tolist(),
                                  p[roots].tolist(), hit.tolist(), extra.tolist()))
        if hit.size == 0:
            break
    return RejectionResult(state.rejected.copy(), rounds)


def _antichain_groups(roots: np.ndarray, P: np.ndarray) -> list:
    """Greedy partition of roots into mutually incomparable groups."""
    order = roots[np.lexsort(np.vstack([P[roots].T[::-1], -P[roots].sum(axis=1)]))] if roots.size else roots
    groups: list = []
    for r in order:
        for g in groups:
            Q = P[g]
            if not ((Q >= P[r]).all(axis=1) | (Q <= P[r]).all(axis=1)).any():
                g.append(int(r))
                break
        else:
            groups.append([int(r)])
    return [np.asarray(g, dtype=np.int64) for g in groups]


def _gatekeep(members, budgets, tiers, p, weights) -> np.ndarray:
    """Serial gatekeeping across tiers inside one incomparable group.

    The group's joint budget goes to its highest-priority tier and is split
    among that tier's members in proportion to their own budgets. Testing
    stops at the first tier without a rejection; otherwise each rejected node
    frees ``budget - p``, which is divided over the remaining tiers by weight.
    """
    levels = np.unique(tiers)
    pot = {int(t): 0.0 for t in levels}
    pot[int(levels[0])] = float(budgets.sum())
    rejected = []
    for li, t in enumerate(levels):
        sel = tiers == t
        own = budgets[sel]
        share = pot[int(t)] * own / own.sum() if own.sum() > 0 else np.full(own.size, pot[int(t)] / own.size)
        hit = p[members[sel]] <= share
        if not hit.any():
            break
        rejected.extend(members[sel][hit].tolist())
        freed = float((share[hit] - p[members[sel]][hit]).sum())
        rest = levels[li + 1:]
        if rest.size:
            w = weights[rest - 1]
            for tt, ww in zip(rest, w / w.sum()):
                pot[int(tt)] += freed * ww
    return np.asarray(rejected, dtype=np.int64)


def dag_test_tiered(hyps: HypothesisSet, forest: Polyforest, alpha: float,
                    tiers: TierConfig, grid: GridSpec) -> RejectionResult:
    """DAG test with tier-ordered gatekeeping inside each round.

    Roots are grouped into antichains; each group pools its members'
    leaf-proportional budgets and spends them tier by tier (see
    ``_gatekeep``). With a single tier this reduces to :func:`dag_test`.
    """
    alpha = _check_alpha(alpha)
    if hyps.p_valid is None:
        raise InputError("dag_test_tiered needs validation p-values")
    node_tier = tiers.node_tiers(hyps.profiles, grid) if hyps.m else np.zeros(0, dtype=int)
    weights = tiers.weights()
    state = _ForestState(hyps, forest)
    p = hyps.p_valid
    rounds = []
    while True:
        roots, budgets = state.roots_and_budgets(alpha)
        if roots.size == 0:
            break
        budget_of = dict(zip(roots.tolist(), budgets.tolist()))
        hits = []
        for g in _antichain_groups(roots, state.P):
            b = np.array([budget_of[int(i)] for i in g])
            hits.append(_gatekeep(g, b, node_tier[g], p, weights))
        hit = np.unique(np.concatenate(hits)) if hits else np.zeros(0, dtype=np.int64)
        extra = state.reject(hit)
        rounds.append(RoundRecord(len(rounds) + 1, roots.tolist(), budgets.tolist(),
                                  p[roots].tolist(), hit.tolist(), extra.tolist()))
        if hit.size == 0:
            break
    return RejectionResult(state.rejected.copy(), rounds)


def _item_index(item, grid: GridSpec) -> int:
    if isinstance(item, str):
        if item not in grid.item_names:
            raise InputError(f"unknown item {item!r}")
        return grid.item_names.index(item)
    item = int(item)
    if not 0 <= item < grid.dim:
        raise InputError(f"item index {item} out of range")
    return item


def marginal_risk_ratio(item, data: EncodedDataset) -> float:
    """``P(Y=1 | item >= 1) / P(Y=1 | item = 0)``; ``inf`` if the reference rate is 0."""
    j = _item_index(item, data.grid)
    exposed = data.X[:, j] >= 1
    if exposed.all() or not exposed.any():
        raise UndefinedResultError(f"item {data.grid.item_names[j]} has an empty exposure group")
    r1 = data.y[exposed].mean()
    r0 = data.y[~exposed].mean()
    if r0 == 0:
        return math.inf
    return float(r1 / r0)


def conditional_dominance_test(i, j, data: EncodedDataset) -> float:
    """One-sided Mantel-Haenszel p-value that item ``i`` outweighs item ``j``.

    Rows are stratified on the binarized levels of every other item. In each
    stratum holding both discordant profiles, rows with ``(i>=1, j=0)`` are
    compared with rows with ``(i=0, j>=1)``; the alternative is a higher
    outcome rate in the first group. Normal approximation, no continuity
    correction.
    """
    a = _item_index(i, data.grid)
    b = _item_index(j, data.grid)
    if a == b:
        raise InputError("conditional dominance needs two different items")
    B = data.X >= 1
    grp1 = B[:, a] & ~B[:, b]
    grp0 = ~B[:, a] & B[:, b]
    keep = grp1 | grp0
    others = [k for k in range(data.grid.dim) if k not in (a, b)]
    if others:
        key = B[keep][:, others].astype(np.int64) @ (1 << np.arange(len(others), dtype=np.int64))
    else:
        key = np.zeros(int(keep.sum()), dtype=np.int64)
    g1 = grp1[keep].astype(float)
    yk = data.y[keep].astype(float)
    _, s = np.unique(key, return_inverse=True)
    s = s.ravel()
    n1 = np.bincount(s, weights=g1)
    N = np.bincount(s).astype(float)
    n0 = N - n1
    m1 = np.bincount(s, weights=yk)
    a1 = np.bincount(s, weights=g1 * yk)
    ok = (n1 > 0) & (n0 > 0)
    if not ok.any():
        raise UndefinedResultError("no stratum contains both discordant profiles")
    n1, n0, N, m1, a1 = n1[ok], n0[ok], N[ok], m1[ok], a1[ok]
    expected = n1 * m1 / N
    var = n1 * n0 * m1 * (N - m1) / (N * N * (N - 1))
    if var.sum() <= 0:
        raise UndefinedResultError("outcome does not vary within discordant strata")
    z = (a1 - expected).sum() / math.sqrt(var.sum())
    return float(norm.sf(z))


def derive_tiers(data: EncodedDataset, n_tiers: int = 3, sizes: Sequence[int] | None = None) -> TierConfig:
    """Rank items by marginal risk ratio (after binarizing) and cut into tiers.

    Items whose ratio is undefined are ranked last. ``sizes`` defaults to a
    near-even split.
    """
    names = data.grid.item_names
    rr = []
    for k in range(data.grid.dim):
        try:
            rr.append(marginal_risk_ratio(k, data))
        except UndefinedResultError:
            rr.append(-math.inf)
    order = sorted(range(len(names)), key=lambda k: (-rr[k], k))
    if sizes is None:
        sizes = [len(c) for c in np.array_split(np.arange(len(names)), n_tiers)]
    if sum(sizes) != len(names):
        raise InputError("tier sizes must add up to the number of items")
    tiers, pos = {}, 0
    for t, sz in enumerate(sizes, start=1):
        for k in order[pos:pos + sz]:
            tiers[names[k]] = t
        pos += sz
    return TierConfig(tiers)
