"""Plate detection, depth registration, height maps, tilt correction, mm scale."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .imaging import PlateCircle, canny, hough_circle
from .model import DepthMap, HeightMap, RasterImage, check_same_shape

PLATE_DIAMETER_MM = 259.0


@dataclass(frozen=True)
class RegistrationTransform:
    tx: float
    ty: float

    def integer(self) -> tuple[int, int]:
        return int(round(self.tx)), int(round(self.ty))


@dataclass(frozen=True)
class PixelScale:
    dx_mm_per_px: float
    plate_diameter_mm: float = PLATE_DIAMETER_MM

    def __post_init__(self):
        if not self.dx_mm_per_px > 0:
            raise ValueError("dx_mm_per_px must be positive")


@dataclass(frozen=True)
class TiltCorrectionConfig:
    table_margin_px: float = 5.0
    min_table_pixels_per_row: int = 3

    def __post_init__(self):
        if self.table_margin_px < 0:
            raise ConfigError("table_margin_px must be >= 0")
        if self.min_table_pixels_per_row < 1:
            raise ConfigError("min_table_pixels_per_row must be >= 1")


@dataclass
class CorrectionReport:
    skipped_rows: list = field(default_factory=list)
    mean_abs_residual_mm: float = 0.0

    def to_dict(self) -> dict:
        return {
            "rows_skipped": list(self.skipped_rows),
            "mean_abs_residual_table_height_mm": self.mean_abs_residual_mm,
        }


def detect_plate(
    rgb: RasterImage,
    r_min: int,
    r_max: int,
    sigma: float = 3.0,
    low: float = 10.0,
    high: float = 50.0,
    **hough_kw,
) -> PlateCircle:
    edges = canny(rgb, sigma=sigma, low=low, high=high)
    return hough_circle(edges, r_min, r_max, **hough_kw)


def register(calib: PlateCircle, plate: PlateCircle) -> RegistrationTransform:
    """Translation carrying the calibration plate onto the food plate."""
    return RegistrationTransform(plate.cx - calib.cx, plate.cy - calib.cy)


def shift_depth(d: DepthMap, t: RegistrationTransform) -> DepthMap:
    """Move content by (tx, ty) whole pixels; uncovered pixels become invalid."""
    tx, ty = t.integer()
    h, w = d.shape
    out = np.full((h, w), np.nan)
    src = d.data
    ys, yd = (slice(0, h - ty), slice(ty, h)) if ty >= 0 else (slice(-ty, h), slice(0, h + ty))
    xs, xd = (slice(0, w - tx), slice(tx, w)) if tx >= 0 else (slice(-tx, w), slice(0, w + tx))
    if abs(tx) < w and abs(ty) < h:
        out[yd, xd] = src[ys, xs]
    return DepthMap(out)


def compute_height_map(calib: DepthMap, plate: DepthMap, t: RegistrationTransform) -> HeightMap:
    check_same_shape(calib, plate)
    shifted = shift_depth(calib, t)
    valid = shifted.valid & plate.valid
    with np.errstate(invalid="ignore"):
        h = shifted.data - plate.data
    return HeightMap(np.where(valid, h, 0.0), valid)


def table_mask(shape, circle: PlateCircle, margin: float) -> np.ndarray:
    yy, xx = np.indices(shape)
    return np.hypot(xx - circle.cx, yy - circle.cy) > circle.r_hat + margin


def tilt_correct(
    hm: HeightMap,
    circle: PlateCircle,
    cfg: TiltCorrectionConfig = TiltCorrectionConfig(),
    report: CorrectionReport | None = None,
) -> HeightMap:
    """Row-wise removal of the table plane.

    Each row's left and right table strips give mean heights h_L, h_R at
    their centroid columns x_L, x_R; the line through those two points is
    subtracted from the whole row.
    """
    h, w = hm.shape
    table = table_mask((h, w), circle, cfg.table_margin_px) & hm.valid
    cols = np.arange(w, dtype=np.float64)
    left_side = cols < circle.cx
    out = hm.data.copy()
    residuals = []
    skipped = []
    for y in range(h):
        left = table[y] & left_side
        right = table[y] & ~left_side
        if left.sum() < cfg.min_table_pixels_per_row or right.sum() < cfg.min_table_pixels_per_row:
            skipped.append(y)
            continue
        row = hm.data[y]
        h_l, x_l = row[left].mean(), cols[left].mean()
        h_r, x_r = row[right].mean(), cols[right].mean()
        t = (cols - x_l) / (x_r - x_l)
        out[y] = row - ((1.0 - t) * h_l + t * h_r)
        residuals.append(np.abs(out[y][table[y]]).mean())
    if report is not None:
        report.skipped_rows = skipped
        report.mean_abs_residual_mm = float(np.mean(residuals)) if residuals else 0.0
    return HeightMap(out, hm.valid)


def pixel_scale(circle: PlateCircle, plate_diameter_mm: float = PLATE_DIAMETER_MM) -> PixelScale:
    if not circle.r_hat > 0:
        raise ValueError("plate radius must be positive")
    return PixelScale(plate_diameter_mm / (2.0 * circle.r_hat), plate_diameter_mm)
