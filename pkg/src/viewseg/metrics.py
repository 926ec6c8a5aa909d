"""Pixel confusion counts, the Dice overlap index, and the comparison report."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import KNOWN_VIEWS, MriSlice, ViewLabel


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


ZERO_COUNTS = ConfusionCounts(0, 0, 0, 0)


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """1 where probability >= threshold (ties count as tumor)."""
    if not 0.0 <= threshold <= 1.0:
        raise MetricError(f"threshold {threshold} outside [0, 1]")
    return (_as_numpy(prob_map) >= threshold).astype(np.uint8)


def _check_binary(name: str, m: np.ndarray) -> np.ndarray:
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise MetricError(f"{name} mask is not binary")
    return m.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = _check_binary("predicted", pred)
    g = _check_binary("ground-truth", gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(counts: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); two empty masks score 1.0."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


@dataclass(frozen=True)
class SliceMetrics:
    slice_id: str
    view: ViewLabel
    counts: ConfusionCounts
    dice: float


@dataclass(frozen=True)
class EvalResult:
    per_slice: tuple[SliceMetrics, ...]
    mean_dice: float
    global_dice: float
    pooled: ConfusionCounts
    n: int

    @classmethod
    def from_slices(cls, rows: Iterable[SliceMetrics]) -> "EvalResult":
        rows = tuple(rows)
        if not rows:
            raise MetricError("cannot aggregate an empty evaluation")
        pooled = ZERO_COUNTS
        for r in rows:
            pooled = pooled + r.counts
        # fixed-order summation keeps the aggregate reproducible
        mean = float(sum(r.dice for r in rows) / len(rows))
        return cls(rows, mean, dice(pooled), pooled, len(rows))

    @property
    def dice_values(self) -> list[float]:
        return [r.dice for r in self.per_slice]

    def by_view(self) -> dict[ViewLabel, "EvalResult"]:
        out = {}
        for v in KNOWN_VIEWS:
            rows = [r for r in self.per_slice if r.view is v]
            if rows:
                out[v] = EvalResult.from_slices(rows)
        return out

    def summary(self) -> dict:
        return {
            "n": self.n,
            "mean_dice": self.mean_dice,
            "global_dice": self.global_dice,
            "pooled": {"tp": self.pooled.tp, "fp": self.pooled.fp, "fn": self.pooled.fn, "tn": self.pooled.tn},
        }


METRICS_HEADER = ["slice_id", "view", "tp", "fp", "fn", "tn", "dice"]


def write_slice_metrics(result: EvalResult, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in result.per_slice:
            c = r.counts
            w.writerow([r.slice_id, r.view.value, c.tp, c.fp, c.fn, c.tn, repr(r.dice)])


def read_slice_metrics(path: str | os.PathLike) -> EvalResult:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise MetricError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        rows = [
            SliceMetrics(
                r["slice_id"],
                ViewLabel(r["view"]),
                ConfusionCounts(int(r["tp"]), int(r["fp"]), int(r["fn"]), int(r["tn"])),
                float(r["dice"]),
            )
            for r in reader
        ]
    return EvalResult.from_slices(rows)


def evaluate(
    router,
    slices: Sequence[MriSlice],
    threshold: float = 0.5,
    batch_size: int = 16,
    reference: Sequence[MriSlice] | None = None,
) -> EvalResult:
    """Route, predict, binarize and score every slice.

    With ``reference`` (the same slices at native resolution, same order) the
    probability maps are resized bilinearly to the reference grid before
    binarizing, and scored against the reference masks.
    """
    from .router import predict_many

    if not slices:
        raise MetricError("empty test set")
    if reference is not None:
        if [r.slice_id for r in reference] != [s.slice_id for s in slices]:
            raise MetricError("reference slices must match the evaluated slices one to one")
    rows = []
    for i, (s, (prob, mask)) in enumerate(zip(slices, predict_many(router, slices, threshold, batch_size))):
        gt = s.mask
        if reference is not None:
            gt = reference[i].mask
            if prob.shape != gt.shape:
                mask = binarize(_resize_prob(prob, gt.shape), threshold)
        c = confusion(mask, gt)
        rows.append(SliceMetrics(s.slice_id, s.view, c, dice(c)))
    return EvalResult.from_slices(rows)


def _resize_prob(prob: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(prob, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=shape, mode="bilinear", align_corners=False)
    return out[0, 0].clamp(0.0, 1.0).numpy()


# ---------------------------------------------------------------------------
# Comparison report

SINGLE_METHOD = "Single LinkNet"
PER_VIEW_METHOD = "Per-view LinkNets"
ALL_ANGLES = "All angles"
# row order of the report: coronal, sagittal, axial
REPORT_VIEWS = (ViewLabel.CORONAL, ViewLabel.SAGITTAL, ViewLabel.AXIAL)
REPORT_HEADER = ["method", "data", "dice"]


@dataclass(frozen=True)
class ReportRow:
    method: str
    data: str
    dice: float
    global_dice: float | None = field(default=None, compare=False)
    n: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.method, r.data, repr(r.dice)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonReport":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != REPORT_HEADER:
            raise MetricError("report must have header method,data,dice")
        return cls(tuple(ReportRow(r["method"], r["data"], float(r["dice"])) for r in reader))

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ComparisonReport":
        return cls.from_csv(Path(path).read_text())

    def dice_for(self, data: str) -> float:
        for r in self.rows:
            if r.data == data:
                return r.dice
        raise KeyError(data)

    def format_table(self) -> str:
        lines = [f"{'Method':<20} {'Data':<12} {'Mean Dice':>9} {'Global Dice':>11} {'Slices':>6}"]
        for r in self.rows:
            g = "" if r.global_dice is None else f"{r.global_dice:.4f}"
            n = "" if r.n is None else str(r.n)
            lines.append(f"{r.method:<20} {r.data:<12} {r.dice:>9.4f} {g:>11} {n:>6}")
        return "\n".join(lines) + "\n"


def comparison_report(
    single: EvalResult | None = None, per_view: Mapping[ViewLabel, EvalResult] | None = None
) -> ComparisonReport:
    """Rows: single network on all angles first, then coronal, sagittal, axial."""
    if single is None and not per_view:
        raise MetricError("report needs a single-network or per-view evaluation")
    rows = []
    if single is not None:
        rows.append(ReportRow(SINGLE_METHOD, ALL_ANGLES, single.mean_dice, single.global_dice, single.n))
    for v in REPORT_VIEWS:
        if per_view and v in per_view:
            r = per_view[v]
            rows.append(ReportRow(PER_VIEW_METHOD, v.value.capitalize(), r.mean_dice, r.global_dice, r.n))
    return ComparisonReport(tuple(rows))
