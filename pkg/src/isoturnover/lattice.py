"""Product-lattice primitives.

Profiles are tuples of non-negative ints, one level per item. The order is the
coordinate-wise one: ``a <= b`` iff ``a[j] <= b[j]`` for every item ``j``.
Upward-closed sets are stored by their minimal corners.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from isoturnover.errors import InputError

Profile = tuple  # tuple[int, ...]

# Inclusion-exclusion is preferred up to this many corners.
_IE_MAX_CORNERS = 24
# Largest grid enumerated in a single pass.
_ENUM_MAX_CELLS = 50_000_000
_CHUNK = 65_536


@dataclass(frozen=True)
class GridSpec:
    """Finite product of chains: item ``j`` takes levels ``0 .. levels[j]-1``."""

    levels: tuple
    item_names: tuple
    reverse_coded: tuple = field(default=None)

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        names = tuple(str(v) for v in self.item_names)
        if len(levels) != len(names):
            raise InputError(f"{len(levels)} level counts for {len(names)} item names")
        if len(levels) == 0:
            raise InputError("grid needs at least one item")
        if any(v < 2 for v in levels):
            raise InputError(f"every item needs at least 2 levels, got {levels}")
        if len(set(names)) != len(names):
            raise InputError("item names must be unique")
        rev = self.reverse_coded
        rev = (False,) * len(levels) if rev is None else tuple(bool(v) for v in rev)
        if len(rev) != len(levels):
            raise InputError("reverse_coded must have one flag per item")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "item_names", names)
        object.__setattr__(self, "reverse_coded", rev)

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def size(self) -> int:
        return math.prod(self.levels)

    @property
    def top(self) -> Profile:
        return tuple(v - 1 for v in self.levels)

    @property
    def bottom(self) -> Profile:
        return (0,) * self.dim

    def same_items(self, other: "GridSpec") -> bool:
        return self.item_names == other.item_names

    def check(self, x) -> Profile:
        """Return ``x`` as a profile tuple, raising InputError if it is off-grid."""
        x = tuple(int(v) for v in x)
        if len(x) != self.dim:
            raise InputError(f"profile has {len(x)} coordinates, grid has {self.dim}")
        for v, lv, name in zip(x, self.levels, self.item_names):
            if not 0 <= v < lv:
                raise InputError(f"level {v} out of range for item {name} ({lv} levels)")
        return x

    def check_array(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise InputError(f"expected an (n, {self.dim}) profile array, got shape {X.shape}")
        if X.size and ((X < 0).any() or (X >= np.asarray(self.levels)).any()):
            raise InputError("profile array contains off-grid levels")
        return X

    def enumerate(self) -> np.ndarray:
        """All profiles, lexicographic order, as an (size, dim) int array."""
        grids = np.indices(self.levels).reshape(self.dim, -1).T
        return np.ascontiguousarray(grids, dtype=np.int64)

    def index(self, X) -> np.ndarray:
        """Mixed-radix position of each profile in :meth:`enumerate` order."""
        X = np.atleast_2d(np.asarray(X, dtype=np.int64))
        return np.ravel_multi_index(tuple(X.T), self.levels)

    def to_dict(self) -> dict:
        return {
            "items": [
                {"name": n, "levels": lv, "reverse_coded": r}
                for n, lv, r in zip(self.item_names, self.levels, self.reverse_coded)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        try:
            items = d["items"]
            return cls(
                levels=tuple(int(it["levels"]) for it in items),
                item_names=tuple(it["name"] for it in items),
                reverse_coded=tuple(bool(it.get("reverse_coded", False)) for it in items),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed grid description: {exc}") from exc


def _pair(a, b):
    a = tuple(a)
    b = tuple(b)
    if len(a) != len(b):
        raise InputError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return a, b


def leq(a, b, grid: GridSpec | None = None) -> bool:
    """True iff ``a[j] <= b[j]`` for every coordinate."""
    a, b = _pair(a, b)
    if grid is not None:
        grid.check(a)
        grid.check(b)
    return all(u <= v for u, v in zip(a, b))


def strictly_below(a, b) -> bool:
    a, b = _pair(a, b)
    return a != b and all(u <= v for u, v in zip(a, b))


def linf_distance(a, b) -> int:
    a, b = _pair(a, b)
    return max((abs(u - v) for u, v in zip(a, b)), default=0)


def minimal_corners(members: Iterable, grid: GridSpec | None = None) -> tuple:
    """Minimal elements of ``members``, sorted lexicographically.

    Works for any finite set of profiles (the upward-closed case is the usual
    one). Points are swept in order of increasing level sum; a point is minimal
    iff none of the minimal points found so far lies below it.
    """
    M = np.asarray(list(members) if not isinstance(members, np.ndarray) else members,
                   dtype=np.int64)
    if M.size == 0:
        return ()
    if M.ndim != 2:
        raise InputError("members must be a collection of equal-length profiles")
    if grid is not None:
        grid.check_array(M)
    M = np.unique(M, axis=0)
    order = np.lexsort(M.T[::-1])
    order = order[np.argsort(M[order].sum(axis=1), kind="stable")]
    found = np.empty((0, M.shape[1]), dtype=np.int64)
    for x in M[order]:
        if found.shape[0] and (found <= x).all(axis=1).any():
            continue
        found = np.vstack([found, x])
    return tuple(sorted(tuple(int(v) for v in row) for row in found))


def _dominates_any(X: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Row mask: X[i] >= some corner."""
    out = np.zeros(X.shape[0], dtype=bool)
    if corners.shape[0] == 0 or X.shape[0] == 0:
        return out
    for start in range(0, X.shape[0], _CHUNK):
        block = X[start:start + _CHUNK]
        out[start:start + _CHUNK] = (block[:, None, :] >= corners[None, :, :]).all(axis=2).any(axis=1)
    return out


@dataclass(frozen=True)
class UpwardClosedSet:
    """Upward closure of an antichain of corners on a grid.

    Dominated corners passed in are dropped; stored corners are sorted.
    """

    grid: GridSpec
    corners: tuple = ()

    def __post_init__(self):
        checked = [self.grid.check(c) for c in self.corners]
        object.__setattr__(self, "corners", minimal_corners(checked) if checked else ())

    @classmethod
    def empty(cls, grid: GridSpec) -> "UpwardClosedSet":
        return cls(grid, ())

    @classmethod
    def full(cls, grid: GridSpec) -> "UpwardClosedSet":
        return cls(grid, (grid.bottom,))

    @classmethod
    def from_members(cls, grid: GridSpec, members) -> "UpwardClosedSet":
        """Closure of an arbitrary collection of profiles."""
        return cls(grid, minimal_corners(members, grid))

    @property
    def corner_array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=np.int64).reshape(len(self.corners), self.grid.dim)

    def is_empty(self) -> bool:
        return not self.corners

    def __contains__(self, x) -> bool:
        return closure_membership(x, self)

    def __len__(self) -> int:
        return closure_count(self)

    def contains_many(self, X) -> np.ndarray:
        X = self.grid.check_array(X)
        return _dominates_any(X, self.corner_array)

    def members(self) -> np.ndarray:
        """Every grid profile in the closure (enumerates the grid)."""
        allp = self.grid.enumerate()
        return allp[self.contains_many(allp)]

    def _compatible(self, other: "UpwardClosedSet"):
        if self.grid != other.grid:
            raise InputError("sets live on different grids")

    def union(self, other: "UpwardClosedSet") -> "UpwardClosedSet":
        self._compatible(other)
        return UpwardClosedSet(self.grid, self.corners + other.corners)

    def intersection(self, other: "UpwardClosedSet") -> "UpwardClosedSet":
        self._compatible(other)
        joins = [tuple(max(u, v) for u, v in zip(a, b)) for a in self.corners for b in other.corners]
        return UpwardClosedSet(self.grid, joins)

    def issubset(self, other: "UpwardClosedSet") -> bool:
        self._compatible(other)
        return all(c in other for c in self.corners)

    def coverage(self) -> float:
        return closure_count(self) / self.grid.size

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "corners": [list(c) for c in self.corners]}

    @classmethod
    def from_dict(cls, d: dict, grid: GridSpec | None = None) -> "UpwardClosedSet":
        g = GridSpec.from_dict(d["grid"]) if "grid" in d else grid
        if g is None:
            raise InputError("corner set has no grid description")
        if grid is not None and not g.same_items(grid):
            raise InputError(f"corner items {g.item_names} do not match {grid.item_names}")
        return cls(g, tuple(tuple(c) for c in d.get("corners", [])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["corner", *self.grid.item_names])
        for i, c in enumerate(self.corners, start=1):
            w.writerow([i, *c])
        return buf.getvalue()


def closure_membership(x, ucs: UpwardClosedSet) -> bool:
    """True iff some corner of ``ucs`` lies below ``x``."""
    x = ucs.grid.check(x)
    return any(all(c <= v for c, v in zip(corner, x)) for corner in ucs.corners)


def _box_sizes(V: np.ndarray, levels) -> list:
    top = np.asarray(levels, dtype=object)
    return [math.prod(int(t) - int(v) for t, v in zip(top, row)) for row in V]


def closure_count_ie(ucs: UpwardClosedSet) -> int:
    """Exact closure size by inclusion-exclusion over corner joins.

    The union indicator is kept as a signed sum of single-corner closures;
    adding corner ``c`` to the union ``U`` uses
    ``|U + up(c)| = |U| + |up(c)| - |U meet up(c)|`` with the meet written as
    joins ``max(v, c)``. Identical join vectors are merged after each step,
    which keeps the expansion far below ``2**k`` terms in practice.
    """
    C = ucs.corner_array
    d = ucs.grid.dim
    V = np.empty((0, d), dtype=np.int64)
    W = np.empty(0, dtype=np.int64)
    for c in C:
        V = np.vstack([V, np.maximum(V, c), c[None, :]])
        W = np.concatenate([W, -W, [1]])
        V, inv = np.unique(V, axis=0, return_inverse=True)
        W = np.bincount(inv.ravel(), weights=W, minlength=V.shape[0]).round().astype(np.int64)
        keep = W != 0
        V, W = V[keep], W[keep]
    sizes = _box_sizes(V, ucs.grid.levels)
    return int(sum(int(w) * s for w, s in zip(W, sizes)))


def closure_count_enum(ucs: UpwardClosedSet) -> int:
    """Exact closure size by scanning every grid cell."""
    grid = ucs.grid
    if grid.size > _ENUM_MAX_CELLS:
        raise InputError(f"grid of {grid.size} cells is too large to enumerate")
    C = ucs.corner_array
    total = 0
    allp = grid.enumerate()
    for start in range(0, allp.shape[0], _CHUNK):
        total += int(_dominates_any(allp[start:start + _CHUNK], C).sum())
    return total


def closure_count(ucs: UpwardClosedSet, method: str = "auto") -> int:
    """Number of grid profiles in the closure.

    ``method`` is ``"ie"``, ``"enum"`` or ``"auto"`` (inclusion-exclusion for
    at most 24 corners, enumeration otherwise unless the grid is too large).
    """
    if not ucs.corners:
        return 0
    if method == "ie":
        return closure_count_ie(ucs)
    if method == "enum":
        return closure_count_enum(ucs)
    if method != "auto":
        raise InputError(f"unknown counting method {method!r}")
    if len(ucs.corners) <= _IE_MAX_CORNERS or ucs.grid.size > _ENUM_MAX_CELLS:
        return closure_count_ie(ucs)
    return closure_count_enum(ucs)


def strict_dominance_matrix(P: np.ndarray) -> np.ndarray:
    """``D[a, b]`` is True iff profile ``a`` strictly dominates profile ``b``."""
    P = np.asarray(P, dtype=np.int64)
    m = P.shape[0]
    D = np.zeros((m, m), dtype=bool)
    step = max(1, _CHUNK // max(m, 1))
    for start in range(0, m, step):
        blk = P[start:start + step]
        D[start:start + step] = (blk[:, None, :] >= P[None, :, :]).all(axis=2)
    # a >= b and b >= a only for equal rows, which are not strict
    return D & ~D.T


def cover_matrix(P: np.ndarray, D: np.ndarray | None = None) -> np.ndarray:
    """``K[j, i]`` is True iff ``j`` covers ``i`` within the candidate rows of ``P``."""
    if D is None:
        D = strict_dominance_matrix(P)
    if D.shape[0] == 0:
        return D.copy()
    Df = D.astype(np.float32)
    between = Df @ Df
    return D & (between == 0)


def cover_set(i, candidates: Sequence, grid: GridSpec | None = None) -> set:
    """Candidates strictly above ``i`` with no candidate strictly in between."""
    i = tuple(i)
    cands = {tuple(c) for c in candidates}
    if grid is not None:
        grid.check(i)
        for c in cands:
            grid.check(c)
    above = [j for j in cands if strictly_below(i, j)]
    return {j for j in above if not any(strictly_below(k, j) for k in above)}


def lift(ucs: UpwardClosedSet, target: GridSpec) -> UpwardClosedSet:
    """Preimage of a coarse set under the level-collapse map ``x -> 1{x >= 1}``.

    A coarse corner ``b`` lifts to the fine corner with the same 0/1 entries,
    because ``C(x) >= b`` iff ``x[j] >= 1`` wherever ``b[j] = 1``.
    """
    if not ucs.grid.same_items(target):
        raise InputError(f"items {ucs.grid.item_names} do not match {target.item_names}")
    if any(lv != 2 for lv in ucs.grid.levels):
        raise InputError("only sets on a binary grid can be lifted")
    return UpwardClosedSet(target, ucs.corners)


def profiles_to_tuples(P) -> list:
    return [tuple(int(v) for v in row) for row in np.asarray(P)]


def iter_grid(grid: GridSpec):
    return itertools.product(*(range(lv) for lv in grid.levels))
