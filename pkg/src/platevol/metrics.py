"""Segmentation accuracy, intake error and dataset-level error statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import BinaryMask, check_same_shape


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _bits(m) -> np.ndarray:
    return m.data if isinstance(m, BinaryMask) else np.asarray(m, bool)


def confusion(pred, target) -> ConfusionCounts:
    p, t = _bits(pred), _bits(target)
    if p.shape != t.shape:
        check_same_shape(BinaryMask(p), BinaryMask(t))
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def global_accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def food_seg_accuracy(c: ConfusionCounts) -> float:
    """TP / (TP + FN); NaN when the target has no food."""
    if c.tp + c.fn == 0:
        return math.nan
    return c.tp / (c.tp + c.fn)


def iou(pred, target) -> float:
    """Intersection over union of food pixels; two empty masks score 1."""
    c = pred if isinstance(pred, ConfusionCounts) else confusion(pred, target)
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def intake_error(pred_amount: float, gt_amount: float, full_amount: float) -> float:
    """100 * (pred - gt) / full. Negative means under-estimating what remains."""
    if not full_amount > 0:
        raise ValueError("full-portion reference must be positive")
    return 100.0 * (pred_amount - gt_amount) / full_amount


def intake_error_2d(pred, gt, full_gt) -> float:
    n_full = int(_bits(full_gt).sum())
    if n_full == 0:
        raise ValueError("empty full-portion reference mask")
    return intake_error(int(_bits(pred).sum()), int(_bits(gt).sum()), n_full)


def intake_error_3d(pred_vol: float, gt_vol: float, full_gt_vol: float) -> float:
    if not full_gt_vol > 0:
        raise ValueError("zero full-portion reference volume")
    return intake_error(pred_vol, gt_vol, full_gt_vol)


@dataclass(frozen=True)
class MeanSD:
    mean: float
    sd: float

    def __str__(self) -> str:
        return f"{self.mean:.1f} ± {self.sd:.1f}"


def mean_sd(values: Iterable[float]) -> MeanSD:
    """Mean and sample (n-1) standard deviation; SD is 0 for one value."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("mean of empty sample")
    mean = math.fsum(v) / len(v)
    if len(v) < 2:
        return MeanSD(mean, 0.0)
    # order-independent: deviations summed with fsum
    var = math.fsum((x - mean) ** 2 for x in v) / (len(v) - 1)
    return MeanSD(mean, math.sqrt(var))


@dataclass(frozen=True)
class ErrorStats:
    mean_abs_error_ml: MeanSD
    mean_error_bias_ml: MeanSD
    volume_intake_error_ml: MeanSD
    n: int


def error_stats(per_plate: Sequence[tuple[float, float, float, float]]) -> ErrorStats:
    """Aggregate (pred_vol, gt_vol, pred_intake, gt_intake) tuples."""
    if len(per_plate) == 0:
        raise ValueError("error_stats needs at least one plate")
    err = [pv - gv for pv, gv, _, _ in per_plate]
    intake_err = [pi - gi for _, _, pi, gi in per_plate]
    return ErrorStats(
        mean_sd(abs(e) for e in err),
        mean_sd(err),
        mean_sd(intake_err),
        len(per_plate),
    )


# ---------------------------------------------------------------- table output

TABLE_FIELDS = (
    "method",
    "n_plates",
    "gsa_mean",
    "gsa_sd",
    "fsa_mean",
    "fsa_sd",
    "iou_mean",
    "iou_sd",
    "intake_err_2d_pct_mean",
    "intake_err_2d_pct_sd",
    "intake_err_3d_pct_mean",
    "intake_err_3d_pct_sd",
    "mean_abs_error_ml_mean",
    "mean_abs_error_ml_sd",
    "mean_error_bias_ml_mean",
    "mean_error_bias_ml_sd",
    "volume_intake_error_ml_mean",
    "volume_intake_error_ml_sd",
)


def table_csv(rows: Sequence[dict]) -> bytes:
    """Method-by-metric summary table, one row per method variant."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for row in rows:
        out = []
        for k in TABLE_FIELDS:
            v = row[k]
            if isinstance(v, float):
                out.append("nan" if math.isnan(v) else f"{v:.3f}" if k.startswith(("gsa", "fsa", "iou")) else f"{v:.1f}")
            else:
                out.append(v)
        w.writerow(out)
    return buf.getvalue().encode("utf-8")


def summarize(method: str, plates: Sequence[dict]) -> dict:
    """Table row from per-plate dicts with gsa/fsa/iou/err2d/err3d/volume fields."""

    def ms(key):
        vals = [p[key] for p in plates if p.get(key) is not None and not math.isnan(p[key])]
        return mean_sd(vals) if vals else MeanSD(math.nan, math.nan)

    row = {"method": method, "n_plates": len(plates)}
    for key, name in (
        ("gsa", "gsa"),
        ("fsa", "fsa"),
        ("iou", "iou"),
        ("intake_err_2d_pct", "intake_err_2d_pct"),
        ("intake_err_3d_pct", "intake_err_3d_pct"),
    ):
        m = ms(key)
        row[f"{name}_mean"], row[f"{name}_sd"] = m.mean, m.sd
    stats = error_stats([(p["pred_vol"], p["gt_vol"], p["pred_intake"], p["gt_intake"]) for p in plates])
    for name in ("mean_abs_error_ml", "mean_error_bias_ml", "volume_intake_error_ml"):
        m = getattr(stats, name)
        row[f"{name}_mean"], row[f"{name}_sd"] = m.mean, m.sd
    return row

