"""Exposure encodings: frequency, binary and ACE-score codings.

Datasets are kept as integer arrays. The frequency coding is the native one;
binary coding collapses every item with ``x -> 1{x >= 1}`` and the score
coding replaces a profile by its number of positive items.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from isoturnover.errors import DataError, InputError
from isoturnover.lattice import GridSpec, UpwardClosedSet

CODINGS = ("binary", "frequency", "score")
OUTCOME_COLUMN = "Y"
PART_COLUMN = "PART"
SCORE_ITEM = "ACE_SCORE"

_MISSING = {"", "na", "nan", "null", "none_given", "."}
_YES = {"1", "yes", "y", "true"}
_NO = {"0", "no", "n", "false"}


@dataclass(frozen=True)
class ItemSpec:
    """One ordinal exposure item.

    ``level_labels[r]`` names raw response code ``r``. For reverse-coded items
    the raw scale runs in the protective direction and label ``r`` maps to
    level ``n_levels - 1 - r``, so the worst answer gets the highest level.
    Integer cells in a CSV are always read as already-oriented levels.
    """

    name: str
    n_levels: int
    reverse_coded: bool = False
    level_labels: tuple | None = None
    aliases: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.n_levels < 2:
            raise InputError(f"item {self.name} needs at least 2 levels")
        if self.level_labels is not None and len(self.level_labels) != self.n_levels:
            raise InputError(f"item {self.name}: {len(self.level_labels)} labels for {self.n_levels} levels")

    def level_of_label(self, raw: int) -> int:
        return self.n_levels - 1 - raw if self.reverse_coded else raw

    def label_table(self) -> dict:
        table = {}
        if self.level_labels is not None:
            for raw, lab in enumerate(self.level_labels):
                table[str(lab).strip().lower()] = self.level_of_label(raw)
        for lab, lev in self.aliases.items():
            table[str(lab).strip().lower()] = int(lev)
        return table

    def parse(self, value: str) -> int | None:
        """Level for a raw cell; None when the cell is missing; ValueError if unknown."""
        s = str(value).strip()
        if s.lower() in _MISSING:
            return None
        try:
            f = float(s)
        except ValueError:
            lev = self.label_table().get(s.lower())
            if lev is None:
                raise ValueError(f"unknown label {s!r}")
            return lev
        if not f.is_integer():
            raise ValueError(f"non-integer level {s!r}")
        lev = int(f)
        if not 0 <= lev < self.n_levels:
            raise ValueError(f"level {lev} outside 0..{self.n_levels - 1}")
        return lev


_YESNO = ("No", "Yes")
_FREQ3 = ("None", "Once", "More than once")
_PROTECT5 = ("Never", "A little of the time", "Some of the time", "Most of the time", "All of the time")

ACE_ITEMS = (
    ItemSpec("ACEDEPRS", 2, level_labels=_YESNO),
    ItemSpec("ACESUB", 2, level_labels=_YESNO),
    ItemSpec("ACEPRISN", 2, level_labels=_YESNO),
    ItemSpec("ACEDIVRC", 2, level_labels=_YESNO),
    ItemSpec("ACEPUNCH", 3, level_labels=_FREQ3, aliases={"never": 0}),
    ItemSpec("ACEHURT1", 3, level_labels=_FREQ3, aliases={"never": 0}),
    ItemSpec("ACESWEAR", 3, level_labels=_FREQ3, aliases={"never": 0}),
    ItemSpec("ACESEX", 3, level_labels=_FREQ3, aliases={"never": 0}),
    ItemSpec("ACEADSAF", 5, reverse_coded=True, level_labels=_PROTECT5, aliases={"a little": 3, "some": 2, "most": 1, "all": 0}),
    ItemSpec("ACEADNED", 5, reverse_coded=True, level_labels=_PROTECT5, aliases={"a little": 3, "some": 2, "most": 1, "all": 0}),
)


def grid_from_items(items: Sequence[ItemSpec]) -> GridSpec:
    return GridSpec(
        levels=tuple(it.n_levels for it in items),
        item_names=tuple(it.name for it in items),
        reverse_coded=tuple(it.reverse_coded for it in items),
    )


def ace_frequency_grid() -> GridSpec:
    return grid_from_items(ACE_ITEMS)


def binary_grid(grid: GridSpec) -> GridSpec:
    """Grid with the same items collapsed to presence/absence."""
    return GridSpec(levels=(2,) * grid.dim, item_names=grid.item_names, reverse_coded=grid.reverse_coded)


def ace_binary_grid() -> GridSpec:
    return binary_grid(ace_frequency_grid())


def score_grid(n_items: int) -> GridSpec:
    return GridSpec(levels=(n_items + 1,), item_names=(SCORE_ITEM,))


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    """Profiles ``X`` (n, d) on ``grid`` with binary outcomes ``y``.

    ``row_ids`` keep the position of each row in the source table so that
    subsets stay traceable; ``part`` holds per-row part labels when present.
    """

    grid: GridSpec
    X: np.ndarray
    y: np.ndarray
    part: np.ndarray | None = None
    part_label: str | None = None
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        X = self.grid.check_array(self.X)
        y = np.asarray(self.y, dtype=np.int8).ravel()
        if y.shape[0] != X.shape[0]:
            raise InputError(f"{X.shape[0]} profiles but {y.shape[0]} outcomes")
        if y.size and not np.isin(y, (0, 1)).all():
            raise InputError("outcomes must be 0 or 1")
        ids = np.arange(X.shape[0]) if self.row_ids is None else np.asarray(self.row_ids)
        part = None if self.part is None else np.asarray(self.part).astype(str)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "row_ids", ids)
        object.__setattr__(self, "part", part)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def rows(self):
        """Iterate (profile, outcome) pairs."""
        for x, y in zip(self.X, self.y):
            yield tuple(int(v) for v in x), int(y)

    def select(self, mask, part_label: str | None = None) -> "EncodedDataset":
        mask = np.asarray(mask)
        return EncodedDataset(
            self.grid, self.X[mask], self.y[mask],
            None if self.part is None else self.part[mask],
            part_label if part_label is not None else self.part_label,
            self.row_ids[mask],
        )

    def split_part(self, label: str) -> "EncodedDataset":
        if self.part is None:
            raise InputError("dataset has no part labels")
        return self.select(np.char.lower(self.part) == label.lower(), part_label=label)

    def with_grid(self, grid: GridSpec, X) -> "EncodedDataset":
        return EncodedDataset(grid, X, self.y, self.part, self.part_label, self.row_ids)

    def distinct_profiles(self) -> np.ndarray:
        return np.unique(self.X, axis=0)


def coarsen(x, freq_grid: GridSpec | None = None) -> tuple:
    """Collapse each coordinate to ``1{level >= 1}``."""
    if freq_grid is not None:
        x = freq_grid.check(x)
    return tuple(1 if int(v) >= 1 else 0 for v in x)


def coarsen_array(X) -> np.ndarray:
    return (np.asarray(X) >= 1).astype(np.int64)


def coarsen_dataset(data: EncodedDataset) -> EncodedDataset:
    return data.with_grid(binary_grid(data.grid), coarsen_array(data.X))


def lift_membership(binary_set: UpwardClosedSet, x, freq_grid: GridSpec | None = None) -> bool:
    """True iff the collapsed profile of ``x`` lies in ``binary_set``."""
    if freq_grid is not None:
        if not freq_grid.same_items(binary_set.grid):
            raise InputError(f"items {freq_grid.item_names} do not match {binary_set.grid.item_names}")
        x = freq_grid.check(x)
    elif len(tuple(x)) != binary_set.grid.dim:
        raise InputError("profile length does not match the binary grid")
    return coarsen(x) in binary_set


def ace_score(x) -> int:
    return sum(1 for v in x if int(v) >= 1)


def ace_score_array(X) -> np.ndarray:
    return (np.asarray(X) >= 1).sum(axis=1).astype(np.int64)


def score_chain(data: EncodedDataset) -> EncodedDataset:
    """Replace every profile by its ACE score on the chain ``0 < 1 < ... < d``."""
    scores = ace_score_array(data.X)[:, None]
    return data.with_grid(score_grid(data.grid.dim), scores)


def score_selection(z0: int | None, grid: GridSpec) -> UpwardClosedSet:
    """The set ``{x : Z(x) >= z0}`` on ``grid``; None gives the empty set.

    Its corners are the 0/1 profiles with exactly ``z0`` positive items.
    """
    if z0 is None or z0 > grid.dim:
        return UpwardClosedSet.empty(grid)
    if z0 <= 0:
        return UpwardClosedSet.full(grid)
    corners = []
    for idx in combinations(range(grid.dim), z0):
        c = [0] * grid.dim
        for j in idx:
            c[j] = 1
        corners.append(tuple(c))
    return UpwardClosedSet(grid, corners)


def encode_dataset(raw_table: Iterable[Mapping], item_specs: Sequence[ItemSpec],
                   coding: str = "frequency", outcome: str = OUTCOME_COLUMN,
                   part: str | None = PART_COLUMN) -> EncodedDataset:
    """Encode item-level rows into a dataset under ``coding``.

    Rows with a missing item or outcome are dropped (complete cases only).
    Unknown values raise :class:`DataError` listing ``(row, column, value)``
    with rows numbered from 1 in input order.
    """
    if coding not in CODINGS:
        raise InputError(f"coding must be one of {CODINGS}, got {coding!r}")
    items = list(item_specs)
    grid = grid_from_items(items)
    X, y, parts, ids, issues = [], [], [], [], []
    has_part = None
    for rownum, row in enumerate(raw_table, start=1):
        if has_part is None:
            missing_cols = [c for c in [it.name for it in items] + [outcome] if c not in row]
            if missing_cols:
                raise DataError(f"input lacks columns {missing_cols}",
                                [(0, c, None) for c in missing_cols])
            has_part = part is not None and part in row
        levels, complete = [], True
        for it in items:
            try:
                lev = it.parse(row[it.name])
            except ValueError:
                issues.append((rownum, it.name, row[it.name]))
                complete = False
                continue
            if lev is None:
                complete = False
            levels.append(lev)
        yv = str(row[outcome]).strip().lower()
        if yv in _MISSING:
            complete = False
        elif yv in _YES:
            yval = 1
        elif yv in _NO:
            yval = 0
        else:
            issues.append((rownum, outcome, row[outcome]))
            complete = False
        if not complete:
            continue
        pv = str(row[part]).strip() if has_part else None
        if has_part and pv.lower() in _MISSING:
            continue
        X.append(levels)
        y.append(yval)
        parts.append(pv)
        ids.append(rownum - 1)
    if issues:
        preview = ", ".join(f"row {r} {c}={v!r}" for r, c, v in issues[:5])
        raise DataError(f"{len(issues)} invalid cells: {preview}", issues)
    Xa = np.asarray(X, dtype=np.int64).reshape(len(X), grid.dim)
    data = EncodedDataset(grid, Xa, np.asarray(y, dtype=np.int8),
                          np.asarray(parts) if has_part else None, None, np.asarray(ids, dtype=np.int64))
    return apply_coding(data, coding)


def apply_coding(data: EncodedDataset, coding: str) -> EncodedDataset:
    """Recode a frequency-resolution dataset."""
    if coding == "frequency":
        return data
    if coding == "binary":
        return coarsen_dataset(data)
    if coding == "score":
        return score_chain(data)
    raise InputError(f"coding must be one of {CODINGS}, got {coding!r}")


def read_csv(path, item_specs: Sequence[ItemSpec], coding: str = "frequency") -> EncodedDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        return encode_dataset(csv.DictReader(fh), item_specs, coding)


def items_from_levels(names: Sequence[str], levels: Sequence[int],
                      reverse: Sequence[bool] | None = None) -> tuple:
    rev = reverse or [False] * len(names)
    return tuple(ItemSpec(n, int(lv), bool(r)) for n, lv, r in zip(names, levels, rev))


def preset_items(name: str) -> tuple:
    if name.lower() in ("ace", "ace10", "brfss"):
        return ACE_ITEMS
    raise InputError(f"unknown item preset {name!r}")
