"""Screening-rule evaluation: confusion counts and rates.

A rule flags row ``i`` when its profile meets an ACE-score cutoff or falls in
an upward-closed subgroup. Ratios with an empty denominator are NaN and named
in ``ScreeningReport.undefined``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from isoturnover.coding import EncodedDataset, ace_score_array
from isoturnover.errors import InputError
from isoturnover.lattice import UpwardClosedSet

# column order of the screening table
REPORT_COLUMNS = ("rule", "ppr", "sensitivity", "specificity", "ppv", "npv", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class ScreeningRule:
    """``kind`` is ``"score_cutoff"`` (flag ``Z(x) >= K``) or ``"subgroup"``."""

    kind: str
    cutoff: int | None = None
    subgroup: UpwardClosedSet | None = None
    label: str | None = None

    @classmethod
    def score_cutoff(cls, K: int, n_items: int | None = None) -> "ScreeningRule":
        if K < 1 or (n_items is not None and K > n_items):
            raise InputError(f"cutoff {K} outside 1..{n_items}")
        return cls("score_cutoff", cutoff=int(K), label=f"ACE score >= {K}")

    @classmethod
    def from_subgroup(cls, sel: UpwardClosedSet, label: str = "subgroup") -> "ScreeningRule":
        return cls("subgroup", subgroup=sel, label=label)

    def flags(self, data: EncodedDataset) -> np.ndarray:
        if self.kind == "score_cutoff":
            if self.cutoff > data.grid.dim:
                raise InputError(f"cutoff {self.cutoff} exceeds the {data.grid.dim} items")
            return ace_score_array(data.X) >= self.cutoff
        if self.kind == "subgroup":
            if not self.subgroup.grid.same_items(data.grid):
                raise InputError("subgroup items do not match the dataset")
            return self.subgroup.contains_many(data.X)
        raise InputError(f"unknown rule kind {self.kind!r}")


@dataclass
class ScreeningReport:
    label: str
    tp: int
    fp: int
    fn: int
    tn: int
    ppr: float = field(init=False)
    sensitivity: float = field(init=False)
    specificity: float = field(init=False)
    ppv: float = field(init=False)
    npv: float = field(init=False)
    undefined: tuple = field(init=False)

    def __post_init__(self):
        n = self.tp + self.fp + self.fn + self.tn

        def ratio(a, b):
            return a / b if b else math.nan

        self.ppr = ratio(self.tp + self.fp, n)
        self.sensitivity = ratio(self.tp, self.tp + self.fn)
        self.specificity = ratio(self.tn, self.tn + self.fp)
        self.ppv = ratio(self.tp, self.tp + self.fp)
        self.npv = ratio(self.tn, self.tn + self.fn)
        self.undefined = tuple(k for k in ("ppr", "sensitivity", "specificity", "ppv", "npv")
                               if math.isnan(getattr(self, k)))

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def row(self) -> dict:
        return {"rule": self.label, "ppr": self.ppr, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "ppv": self.ppv, "npv": self.npv,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(flags, labels, label: str = "rule") -> ScreeningReport:
    """Report for predicted ``flags`` against binary ``labels``."""
    f = np.asarray(flags, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    if f.shape != y.shape:
        raise InputError("flags and labels differ in length")
    tp = int((f & y).sum())
    fp = int((f & ~y).sum())
    fn = int((~f & y).sum())
    return ScreeningReport(label, tp, fp, fn, int(f.size - tp - fp - fn))


def evaluate_rule(rule: ScreeningRule, data: EncodedDataset, labels=None) -> ScreeningReport:
    """Score ``rule`` against ``labels`` (default: the observed outcomes)."""
    y = data.y if labels is None else labels
    return confusion(rule.flags(data), y, rule.label or rule.kind)


def cutoff_sweep(data: EncodedDataset, Ks, subgroup: UpwardClosedSet | None = None,
                 subgroup_label: str = "subgroup") -> list:
    """One report per ACE-score cutoff, then the subgroup rule if given."""
    out = [evaluate_rule(ScreeningRule.score_cutoff(int(K), data.grid.dim), data) for K in sorted(Ks)]
    if subgroup is not None:
        out.append(evaluate_rule(ScreeningRule.from_subgroup(subgroup, subgroup_label), data))
    return out


@dataclass(frozen=True)
class MatchedComparison:
    subgroup: str
    cutoff: str
    subgroup_specificity: float
    cutoff_specificity: float
    subgroup_sensitivity: float
    cutoff_sensitivity: float
    delta_sensitivity: float
    relative_gain: float

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in self.__dict__.items()}


def matched_specificity_compare(reports, subgroup_label: str | None = None) -> MatchedComparison:
    """Compare the subgroup rule with the cutoff of closest specificity.

    Among cutoffs whose specificity is at least the subgroup's, the closest is
    taken; if none reaches it, the closest overall.
    """
    reports = list(reports)
    if subgroup_label is None:
        sub = reports[-1]
        cuts = reports[:-1]
    else:
        sub = next((r for r in reports if r.label == subgroup_label), None)
        if sub is None:
            raise InputError(f"no report labelled {subgroup_label!r}")
        cuts = [r for r in reports if r is not sub]
    cuts = [r for r in cuts if not math.isnan(r.specificity)]
    if not cuts:
        raise InputError("need at least one cutoff report with defined specificity")
    above = [r for r in cuts if r.specificity >= sub.specificity]
    pool = above or cuts
    best = min(pool, key=lambda r: (abs(r.specificity - sub.specificity), r.label))
    delta = sub.sensitivity - best.sensitivity
    gain = delta / best.sensitivity if best.sensitivity else math.nan
    return MatchedComparison(sub.label, best.label, sub.specificity, best.specificity,
                             sub.sensitivity, best.sensitivity, delta, gain)


def reports_to_csv(reports, digits: int | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        if digits is not None:
            row = {k: (round(v, digits) if isinstance(v, float) else v) for k, v in row.items()}
        w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
    return buf.getvalue()
