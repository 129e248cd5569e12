"""Domain types, raster I/O, scene loading and report serialization."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, DimensionMismatch, MissingCalibration, MissingManifest

log = logging.getLogger(__name__)

DEPTH_UNITS_PER_MM = 10  # on-disk depth is tenths of a millimetre
DEPTH_INVALID = 0
EXPECTED_FRAMES = 10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RasterImage:
    """8-bit gray (H, W) or RGB (H, W, 3) image."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.dtype != np.uint8:
            raise TypeError(f"RasterImage expects uint8 data, got {a.dtype}")
        if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
            raise ValueError(f"bad raster shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def luminance(self) -> np.ndarray:
        """Float intensity in [0, 255]."""
        if self.channels == 1:
            return self.data.astype(np.float64)
        rgb = self.data.astype(np.float64)
        return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]

    def as_rgb(self) -> np.ndarray:
        if self.channels == 3:
            return self.data
        return np.repeat(self.data[..., None], 3, axis=2)


@dataclass(frozen=True)
class DepthMap:
    """Range in mm; invalid readings are NaN in memory."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {a.shape}")
        if np.any(a[np.isfinite(a)] < 0):
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.data)


@dataclass(frozen=True)
class HeightMap:
    """Food height above the plate in mm. Invalid pixels hold 0."""

    data: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"height map must be 2-D, got shape {a.shape}")
        v = np.ones(a.shape, bool) if self.valid is None else np.asarray(self.valid, bool)
        if v.shape != a.shape:
            raise DimensionMismatch(f"validity {v.shape} vs heights {a.shape}")
        a = np.where(v, a, 0.0)
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "valid", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data).astype(bool)
        if a.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {a.shape}")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def empty(cls, shape) -> "BinaryMask":
        return cls(np.zeros(shape, bool))


def check_same_shape(*items) -> tuple[int, int]:
    shapes = {tuple(x.shape) for x in items}
    if len(shapes) != 1:
        raise DimensionMismatch(f"dimension mismatch: {sorted(shapes)}")
    return shapes.pop()


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    food_id: str
    portion_index: int
    rgb: RasterImage
    plate_depth_frames: tuple
    calib_depth_frames: tuple
    full_portion_ref: str
    gt_mask: Optional[BinaryMask] = None
    calib_rgb: Optional[RasterImage] = None
    seeds: object = None  # graphcut.ScribbleSet

    def __post_init__(self):
        if not 1 <= int(self.portion_index) <= 5:
            raise DataError(f"portion_index {self.portion_index} outside 1-5")
        object.__setattr__(self, "plate_depth_frames", tuple(self.plate_depth_frames))
        object.__setattr__(self, "calib_depth_frames", tuple(self.calib_depth_frames))
        if not self.plate_depth_frames:
            raise DataError(f"{self.scene_id}: no plate depth frames")
        if not self.calib_depth_frames:
            raise MissingCalibration(f"{self.scene_id}: no calibration depth frames")
        items = [self.rgb, *self.plate_depth_frames, *self.calib_depth_frames]
        if self.gt_mask is not None:
            items.append(self.gt_mask)
        if self.calib_rgb is not None:
            items.append(self.calib_rgb)
        if self.seeds is not None:
            items += [self.seeds.fg, self.seeds.bg]
        check_same_shape(*items)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape

    @property
    def is_reference(self) -> bool:
        return self.full_portion_ref == self.scene_id


@dataclass(frozen=True)
class IntakeReport:
    scene_id: str
    method_tag: str
    plate_volume_ml: float
    intake_ml: float
    intake_percent: float
    mask_pixel_count: int
    food_id: str = ""
    portion_index: int = 1
    flags: tuple = field(default=())


# ---------------------------------------------------------------- depth frames


def average_depth_frames(frames: Sequence[DepthMap]) -> DepthMap:
    """Per-pixel mean over valid readings.

    A pixel stays invalid only when every frame is invalid there.
    """
    if len(frames) == 0:
        raise ValueError("no depth frames to average")
    check_same_shape(*frames)
    stack = np.stack([f.data for f in frames])
    valid = np.isfinite(stack)
    n = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        # offsets from the per-pixel minimum keep identical frames exact;
        # sorting makes the sum independent of frame order
        base = np.where(n > 0, np.where(valid, stack, np.inf).min(axis=0), 0.0)
        offsets = np.sort(np.where(valid, stack - base, 0.0), axis=0).sum(axis=0)
        mean = np.where(n > 0, base + offsets / np.maximum(n, 1), np.nan)
    return DepthMap(mean)


# ---------------------------------------------------------------- downsampling


def _blocks(a: np.ndarray, f: int) -> np.ndarray:
    h, w = a.shape[:2]
    if h % f or w % f:
        raise DimensionMismatch(f"{h}x{w} is not divisible by downsample factor {f}")
    return a.reshape(h // f, f, w // f, f, *a.shape[2:]).swapaxes(1, 2)


def downsample_depth(d: DepthMap, f: int) -> DepthMap:
    if f == 1:
        return d
    b = _blocks(d.data, f).reshape(d.shape[0] // f, d.shape[1] // f, f * f)
    valid = np.isfinite(b)
    n = valid.sum(axis=2)
    total = np.where(valid, b, 0.0).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        return DepthMap(np.where(n > 0, total / np.maximum(n, 1), np.nan))


def downsample_rgb(img: RasterImage, f: int) -> RasterImage:
    if f == 1:
        return img
    b = _blocks(img.data.astype(np.float64), f)
    return RasterImage(np.clip(np.rint(b.mean(axis=(2, 3))), 0, 255).astype(np.uint8))


def downsample_mask(m: BinaryMask, f: int, rule: str = "majority") -> BinaryMask:
    if f == 1:
        return m
    b = _blocks(m.data, f)
    if rule == "any":
        return BinaryMask(b.any(axis=(2, 3)))
    return BinaryMask(b.mean(axis=(2, 3)) >= 0.5)


# ---------------------------------------------------------------- raster I/O

_PNM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM; 16-bit samples are big-endian as netpbm defines."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h
    if len(raw) - pos < n * dtype.itemsize:
        raise DataError(f"{path}: truncated PGM raster")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w).astype(np.uint16)


def write_pgm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    h, w = data.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.astype(">u2").tobytes())


def depth_to_units(d: DepthMap) -> np.ndarray:
    units = np.rint(np.nan_to_num(d.data, nan=0.0) * DEPTH_UNITS_PER_MM)
    if units.max(initial=0) > 65535:
        raise ValueError("depth exceeds 16-bit range")
    units[~d.valid] = DEPTH_INVALID
    return units.astype(np.uint16)


def units_to_depth(units: np.ndarray) -> DepthMap:
    mm = units.astype(np.float64) / DEPTH_UNITS_PER_MM
    mm[units == DEPTH_INVALID] = np.nan
    return DepthMap(mm)


def read_depth(path) -> DepthMap:
    return units_to_depth(read_pgm(path))


def write_depth(path, d: DepthMap) -> None:
    write_pgm(path, depth_to_units(d))


def read_rgb(path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def write_rgb(path, img: RasterImage) -> None:
    Image.fromarray(img.as_rgb()).save(path, format="PNG")


def read_mask(path) -> BinaryMask:
    with Image.open(path) as im:
        return BinaryMask(np.asarray(im.convert("L")) > 0)


def write_mask(path, m: BinaryMask) -> None:
    Image.fromarray(m.data.astype(np.uint8) * 255).save(path, format="PNG")


# ---------------------------------------------------------------- scenes

MANIFEST = "manifest.json"


def _frame_paths(root: Path, kind: str) -> list[Path]:
    return sorted(root.glob(f"depth_{kind}_*.pgm"))


def load_scene(path, downsample: int = 1) -> SceneRecord:
    """Load a scene directory, optionally block-downsampling every raster."""
    root = Path(path)
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise MissingManifest(f"{root}: missing {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
        scene_id = str(manifest["scene_id"])
        food_id = str(manifest.get("food_id", scene_id))
        portion_index = int(manifest["portion_index"])
        full_ref = str(manifest.get("full_portion_ref", scene_id))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc})") from exc
    if not 1 <= portion_index <= 5:
        raise DataError(f"{mpath}: portion_index {portion_index} outside 1-5")

    rgb_path = root / "rgb.png"
    if not rgb_path.is_file():
        raise DataError(f"{root}: missing rgb.png")
    plate_paths = _frame_paths(root, "plate")
    calib_paths = _frame_paths(root, "calib")
    if not plate_paths:
        raise DataError(f"{root}: no depth_plate_XX.pgm frames")
    if not calib_paths:
        raise MissingCalibration(f"{root}: no depth_calib_XX.pgm frames")
    for kind, paths in (("plate", plate_paths), ("calib", calib_paths)):
        if len(paths) != EXPECTED_FRAMES:
            log.warning("%s: %d %s frames (expected %d)", scene_id, len(paths), kind, EXPECTED_FRAMES)

    f = downsample
    rgb = downsample_rgb(read_rgb(rgb_path), f)
    plate = [downsample_depth(read_depth(p), f) for p in plate_paths]
    calib = [downsample_depth(read_depth(p), f) for p in calib_paths]
    gt = calib_rgb = seeds = None
    if (root / "gt_mask.png").is_file():
        gt = downsample_mask(read_mask(root / "gt_mask.png"), f)
    if (root / "rgb_calib.png").is_file():
        calib_rgb = downsample_rgb(read_rgb(root / "rgb_calib.png"), f)
    if (root / "seeds_fg.png").is_file() and (root / "seeds_bg.png").is_file():
        from .graphcut import ScribbleSet

        # thin strokes would vanish under a majority vote
        seeds = ScribbleSet(
            downsample_mask(read_mask(root / "seeds_fg.png"), f, rule="any"),
            downsample_mask(read_mask(root / "seeds_bg.png"), f, rule="any"),
            validate=False,
        )
    return SceneRecord(
        scene_id=scene_id,
        food_id=food_id,
        portion_index=portion_index,
        rgb=rgb,
        plate_depth_frames=plate,
        calib_depth_frames=calib,
        full_portion_ref=full_ref,
        gt_mask=gt,
        calib_rgb=calib_rgb,
        seeds=seeds,
    )


def write_scene(record: SceneRecord, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scene_id": record.scene_id,
        "food_id": record.food_id,
        "portion_index": record.portion_index,
        "full_portion_ref": record.full_portion_ref,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    write_rgb(root / "rgb.png", record.rgb)
    for i, d in enumerate(record.plate_depth_frames):
        write_depth(root / f"depth_plate_{i:02d}.pgm", d)
    for i, d in enumerate(record.calib_depth_frames):
        write_depth(root / f"depth_calib_{i:02d}.pgm", d)
    if record.gt_mask is not None:
        write_mask(root / "gt_mask.png", record.gt_mask)
    if record.calib_rgb is not None:
        write_rgb(root / "rgb_calib.png", record.calib_rgb)
    if record.seeds is not None:
        write_mask(root / "seeds_fg.png", record.seeds.fg)
        write_mask(root / "seeds_bg.png", record.seeds.bg)
    return root


def find_scene_dirs(root) -> list[Path]:
    """Scene directories below ``root`` (including ``root`` itself), sorted."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob(MANIFEST))


# ---------------------------------------------------------------- reports

REPORT_FIELDS = (
    "scene_id",
    "food_id",
    "portion_index",
    "method_tag",
    "mask_pixel_count",
    "plate_volume_ml",
    "intake_ml",
    "intake_percent",
)
_ONE_DECIMAL = {"plate_volume_ml", "intake_ml", "intake_percent"}


def round1(x: float) -> float:
    """Round to one decimal, folding -0.0 into 0.0."""
    if not math.isfinite(x):
        return x
    return round(x, 1) + 0.0


def _report_row(r: IntakeReport) -> dict:
    row = {}
    for k in REPORT_FIELDS:
        v = getattr(r, k)
        row[k] = round1(float(v)) if k in _ONE_DECIMAL else v
    return row


def write_report(reports: Sequence[IntakeReport], format: str = "csv") -> bytes:
    rows = [_report_row(r) for r in reports]
    if format == "json":
        return (json.dumps(rows, indent=2) + "\n").encode("utf-8")
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for row in rows:
        w.writerow([f"{row[k]:.1f}" if k in _ONE_DECIMAL else row[k] for k in REPORT_FIELDS])
    return buf.getvalue().encode("utf-8")
