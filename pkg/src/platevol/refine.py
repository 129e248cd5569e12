"""Depth refinement of food masks.

Superpixels whose height quantile is below a threshold are treated as
visually present but volumetrically negligible, and dropped from the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .imaging import PlateCircle, SuperpixelMap
from .model import BinaryMask, HeightMap, check_same_shape


@dataclass(frozen=True)
class RefineConfig:
    p: float = 0.75
    tau_mm: float = 2.0
    n_superpixels: int = 250

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ConfigError(f"quantile level p must be in (0, 1), got {self.p}")
        if not self.tau_mm > 0:
            raise ConfigError(f"tau_mm must be positive, got {self.tau_mm}")
        if self.n_superpixels < 1:
            raise ConfigError("n_superpixels must be >= 1")


def nearest_rank(values: np.ndarray, p: float) -> float:
    """The ceil(p*n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    rank = max(1, math.ceil(p * v.size))
    return float(v[rank - 1])


def superpixel_quantiles(hm: HeightMap, sp: SuperpixelMap, p: float) -> np.ndarray:
    """Nearest-rank p-quantile of heights for every superpixel."""
    labels = sp.labels.ravel()
    heights = hm.data.ravel()
    order = np.lexsort((heights, labels))
    counts = np.bincount(labels, minlength=sp.n_segments)
    if np.any(counts == 0):
        raise ValueError("superpixel map has an empty segment")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ranks = np.maximum(1, np.ceil(p * counts).astype(np.int64))
    return heights[order][starts + ranks - 1]


def refine_mask(
    mask: BinaryMask,
    hm: HeightMap,
    sp: SuperpixelMap,
    cfg: RefineConfig = RefineConfig(),
) -> BinaryMask:
    """Drop mask pixels lying in superpixels whose height quantile is below tau.

    The quantile is taken over every pixel of the superpixel, masked or not.
    Pixels are only ever removed.
    """
    check_same_shape(mask, hm, sp)
    q = superpixel_quantiles(hm, sp, cfg.p)
    low = q < cfg.tau_mm
    return BinaryMask(mask.data & ~low[sp.labels])


def removed_superpixels(mask: BinaryMask, hm: HeightMap, sp: SuperpixelMap, cfg: RefineConfig) -> np.ndarray:
    """Boolean raster of mask pixels removed by refinement (for debug overlays)."""
    return mask.data & ~refine_mask(mask, hm, sp, cfg).data


def clip_to_plate(mask: BinaryMask, circle: PlateCircle) -> BinaryMask:
    return BinaryMask(mask.data & circle.inside(mask.shape))
