"""Dice, sensitivity and specificity over the whole tumor, tumor core and enhancing tumor.

Undefined values (an empty denominator with a non-empty other side) are NaN and
are left out of dataset means; the number left out is reported per column.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

LABELS = (0, 1, 2, 4)
REGIONS = ("wt", "tc", "et")
METRICS = ("dice", "sens", "spec")
COLUMNS = tuple(f"{r}_{m}" for r in REGIONS for m in METRICS)


@dataclass(frozen=True)
class EvalRegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


def region_masks(labels):
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LABELS)
    if bad.any():
        raise ValueError(f"labels outside {{0,1,2,4}}: {sorted(set(np.unique(labels[bad]).tolist()))}")
    return EvalRegionMasks(wt=labels != 0, tc=(labels == 1) | (labels == 4), et=labels == 4)


def _pair(p, t):
    p = np.asarray(p, dtype=bool)
    t = np.asarray(t, dtype=bool)
    if p.shape != t.shape:
        raise ContractViolation(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def _ratio(num, den, other_empty, empty_value):
    if den:
        return num / den
    return empty_value if other_empty else float("nan")


def dice(p, t, empty_value=1.0):
    p, t = _pair(p, t)
    both = int(np.count_nonzero(p & t))
    return _ratio(2 * both, int(p.sum()) + int(t.sum()), True, empty_value)


def sensitivity(p, t, empty_value=1.0):
    p, t = _pair(p, t)
    return _ratio(int(np.count_nonzero(p & t)), int(t.sum()), not p.any(), empty_value)


def specificity(p, t, empty_value=1.0):
    p, t = _pair(p, t)
    return _ratio(int(np.count_nonzero(~p & ~t)), int((~t).sum()), p.all(), empty_value)


@dataclass
class CaseReport:
    case_id: str
    values: dict

    def row(self):
        return [self.case_id] + [self.values[c] for c in COLUMNS]


def case_report(case_id, prediction, truth, empty_value=1.0):
    pm, tm = region_masks(prediction), region_masks(truth)
    values = {}
    for r in REGIONS:
        p, t = getattr(pm, r), getattr(tm, r)
        values[f"{r}_dice"] = dice(p, t, empty_value)
        values[f"{r}_sens"] = sensitivity(p, t, empty_value)
        values[f"{r}_spec"] = specificity(p, t, empty_value)
    return CaseReport(case_id, values)


@dataclass
class DatasetReport:
    cases: list
    means: dict
    undefined: dict

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("case_id",) + COLUMNS)
            for case in self.cases:
                writer.writerow([case.case_id] + [repr(float(case.values[c])) for c in COLUMNS])

    def to_json(self):
        return {"cases": len(self.cases), "means": self.means, "undefined": self.undefined}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


def evaluate_dataset(predictions, truths, case_ids=None, empty_value=1.0):
    """Per-case reports plus NaN-excluding means for each of the nine columns."""
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} ground truths")
    if case_ids is None:
        case_ids = [str(i) for i in range(len(truths))]
    cases = [case_report(cid, p, t, empty_value) for cid, p, t in zip(case_ids, predictions, truths)]
    means, undefined = {}, {}
    for c in COLUMNS:
        vals = np.array([case.values[c] for case in cases], dtype=float)
        ok = ~np.isnan(vals)
        undefined[c] = int((~ok).sum())
        means[c] = float(vals[ok].mean()) if ok.any() else float("nan")
    return DatasetReport(cases, means, undefined)


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if tuple(rows[0]) != ("case_id",) + COLUMNS:
        raise ValueError(f"unexpected report header {rows[0]}")
    return [CaseReport(r[0], {c: float(v) for c, v in zip(COLUMNS, r[1:])}) for r in rows[1:]]
