"""Calibrated food volume and intake."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import BinaryMask, HeightMap, check_same_shape
from .plate import PixelScale

MM3_PER_ML = 1000.0


@dataclass(frozen=True)
class VolumeResult:
    volume_ml: float
    n_food_pixels: int
    n_clamped_pixels: int = 0
    n_invalid_pixels: int = 0


@dataclass(frozen=True)
class IntakeResult:
    intake_ml: float
    intake_percent: float
    reference_volume_ml: float
    flags: tuple = ()


def food_volume(mask: BinaryMask, hm: HeightMap, scale: PixelScale) -> VolumeResult:
    """Sum of (dx)^2 * max(h, 0) over valid masked pixels, in mL."""
    check_same_shape(mask, hm)
    m = mask.data
    n_food = int(m.sum())
    if n_food == 0:
        return VolumeResult(0.0, 0, 0, 0)
    use = m & hm.valid
    h = hm.data[use]
    clamped = int((h < 0).sum())
    # fsum keeps the total independent of pixel ordering
    total_mm = math.fsum(np.maximum(h, 0.0).tolist())
    vol = total_mm * scale.dx_mm_per_px**2 / MM3_PER_ML
    return VolumeResult(vol, n_food, clamped, int((m & ~hm.valid).sum()))


def intake(full: VolumeResult | float, current: VolumeResult | float) -> IntakeResult:
    """Consumed volume relative to the full-portion reference."""
    v_full = full.volume_ml if isinstance(full, VolumeResult) else float(full)
    v_now = current.volume_ml if isinstance(current, VolumeResult) else float(current)
    if v_full < 0:
        raise ValueError("reference volume must be non-negative")
    eaten = v_full - v_now
    flags = []
    if v_full > 0:
        pct = 100.0 * eaten / v_full
    else:
        pct = 0.0
        flags.append("zero_reference")
    if eaten < 0:
        flags.append("negative_intake")
    return IntakeResult(eaten, pct, v_full, tuple(flags))
