"""Region similarity J, contour accuracy F, timing scopes and report writers."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

CSV_COLUMNS = ["seq", "obj", "J_mean", "F_mean", "JF", "match_ms_med", "assign_ms_med", "mem_entries"]

_EIGHT = np.ones((3, 3), dtype=bool)


def _check(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def region_j(pred, truth) -> float:
    """IoU of two masks; 1 when both are empty."""
    pred, truth = _check(pred, truth)
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def boundary(mask) -> np.ndarray:
    """Mask cells with an 8-neighbor outside the mask (the frame edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)


def boundary_f(pred, truth, tol: int = 1) -> float:
    """F-measure of boundary cells matched within Chebyshev distance ``tol``."""
    pred, truth = _check(pred, truth)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    bp, bt = boundary(pred), boundary(truth)
    n_p, n_t = np.count_nonzero(bp), np.count_nonzero(bt)
    if n_p == 0 and n_t == 0:
        return 1.0
    if n_p == 0 or n_t == 0:
        return 0.0
    if tol > 0:
        window = np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool)
        near_t = ndimage.binary_dilation(bt, structure=window)
        near_p = ndimage.binary_dilation(bp, structure=window)
    else:
        near_t, near_p = bt, bp
    precision = np.count_nonzero(bp & near_t) / n_p
    recall = np.count_nonzero(bt & near_p) / n_t
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class Timings:
    """Wall-clock accumulator keyed by label."""

    def __init__(self):
        self.samples: dict[str, list[float]] = {}

    @contextmanager
    def scope(self, label: str):
        t0 = time.perf_counter()
        try:
            yield self
        finally:
            self.samples.setdefault(label, []).append((time.perf_counter() - t0) * 1000.0)

    def add(self, label: str, ms: float) -> None:
        self.samples.setdefault(label, []).append(ms)

    def count(self, label: str) -> int:
        return len(self.samples.get(label, []))

    def total(self, label: str) -> float:
        return float(sum(self.samples.get(label, [])))

    def median(self, label: str) -> float:
        vals = self.samples.get(label)
        return float(statistics.median(vals)) if vals else 0.0

    def mean(self, label: str) -> float:
        vals = self.samples.get(label)
        return float(statistics.fmean(vals)) if vals else 0.0

    def table(self) -> dict[str, dict[str, float]]:
        return {
            label: {"count": len(v), "median_ms": self.median(label), "mean_ms": self.mean(label), "total_ms": self.total(label)}
            for label, v in sorted(self.samples.items())
        }


def timing_scope(acc: Timings, label: str):
    return acc.scope(label)


@dataclass
class EvalReport:
    seq: str
    J: dict[int, list[float]]
    F: dict[int, list[float]]
    match_ms_med: float = 0.0
    assign_ms_med: float = 0.0
    match_ms_total: float = 0.0
    assign_ms_total: float = 0.0
    mem_entries: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def objects(self) -> list[int]:
        return sorted(self.J)

    def J_mean(self, obj: Optional[int] = None) -> float:
        if obj is not None:
            return float(np.mean(self.J[obj]))
        return float(np.mean([self.J_mean(o) for o in self.objects]))

    def F_mean(self, obj: Optional[int] = None) -> float:
        if obj is not None:
            return float(np.mean(self.F[obj]))
        return float(np.mean([self.F_mean(o) for o in self.objects]))

    def JF(self, obj: Optional[int] = None) -> float:
        return 0.5 * (self.J_mean(obj) + self.F_mean(obj))

    def rows(self, include_timing: bool = True) -> list[dict]:
        def row(obj_label, obj):
            return {
                "seq": self.seq,
                "obj": obj_label,
                "J_mean": round(self.J_mean(obj), 6),
                "F_mean": round(self.F_mean(obj), 6),
                "JF": round(self.JF(obj), 6),
                "match_ms_med": round(self.match_ms_med, 4) if include_timing else "",
                "assign_ms_med": round(self.assign_ms_med, 4) if include_timing else "",
                "mem_entries": self.mem_entries,
            }

        return [row(str(o), o) for o in self.objects] + [row("all", None)]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "seq": self.seq,
            "objects": self.objects,
            "J": {str(o): [round(v, 6) for v in self.J[o]] for o in self.objects},
            "F": {str(o): [round(v, 6) for v in self.F[o]] for o in self.objects},
            "J_mean": round(self.J_mean(), 6),
            "F_mean": round(self.F_mean(), 6),
            "JF": round(self.JF(), 6),
            "mem_entries": self.mem_entries,
        }
        if include_timing:
            d.update(
                match_ms_med=self.match_ms_med,
                assign_ms_med=self.assign_ms_med,
                match_ms_total=self.match_ms_total,
                assign_ms_total=self.assign_ms_total,
                timings=self.timings,
            )
        else:
            d.update(match_ms_med=None, assign_ms_med=None, match_ms_total=None, assign_ms_total=None)
        return d


def evaluate(
    seq: str,
    pred_labels: Sequence[np.ndarray],
    truth_labels: Sequence[np.ndarray],
    object_ids: Iterable[int],
    frames: Optional[Iterable[int]] = None,
    tol: int = 1,
) -> EvalReport:
    """Per-object, per-frame J and F; by default over every frame after the annotated one."""
    if len(pred_labels) != len(truth_labels):
        raise ValueError("prediction and truth sequences differ in length")
    frames = list(range(1, len(truth_labels)) if frames is None else frames)
    J: dict[int, list[float]] = {}
    F: dict[int, list[float]] = {}
    for o in object_ids:
        J[o] = [region_j(pred_labels[t] == o, truth_labels[t] == o) for t in frames]
        F[o] = [boundary_f(pred_labels[t] == o, truth_labels[t] == o, tol) for t in frames]
    return EvalReport(seq, J, F)


def summarize(reports: Sequence[EvalReport]) -> dict[str, float]:
    """Dataset-level means over all objects of all sequences."""
    js = [r.J_mean(o) for r in reports for o in r.objects]
    fs = [r.F_mean(o) for r in reports for o in r.objects]
    J, F = float(np.mean(js)), float(np.mean(fs))
    return {"J": J, "F": F, "JF": 0.5 * (J + F)}


def reports_to_json(reports: Sequence[EvalReport], include_timing: bool = True) -> str:
    payload = {
        "summary": {k: round(v, 6) for k, v in summarize(reports).items()},
        "sequences": [r.to_dict(include_timing) for r in reports],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports: Sequence[EvalReport], include_timing: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(r.rows(include_timing))
    return buf.getvalue()
