"""Synthetic top-down RGB-D plate scenes with analytically known food volumes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError
from .imaging import PlateCircle
from .model import BinaryMask, DepthMap, RasterImage, SceneRecord, write_scene

TABLE_RGB = (62, 48, 40)
PLATE_RGB = (236, 236, 230)


@dataclass(frozen=True)
class Cylinder:
    radius_mm: float
    height_mm: float
    offset_mm: tuple = (0.0, 0.0)
    color: tuple = (196, 140, 60)
    name: str = "cylinder"

    @property
    def outer_mm(self) -> float:
        return self.radius_mm

    inner_mm = 0.0

    def height(self, rho):
        return np.where(rho <= self.radius_mm, self.height_mm, 0.0)

    def volume_ml(self) -> float:
        return math.pi * self.radius_mm**2 * self.height_mm / 1000.0

    def scaled(self, remaining: float):
        return replace(self, height_mm=self.height_mm * remaining)


@dataclass(frozen=True)
class SphericalCap:
    base_radius_mm: float
    height_mm: float
    offset_mm: tuple = (0.0, 0.0)
    color: tuple = (120, 170, 70)
    name: str = "cap"

    @property
    def outer_mm(self) -> float:
        return self.base_radius_mm

    inner_mm = 0.0

    @property
    def sphere_radius_mm(self) -> float:
        a, h = self.base_radius_mm, self.height_mm
        return (a * a + h * h) / (2.0 * h)

    def height(self, rho):
        if self.height_mm <= 0:
            return np.zeros_like(rho, dtype=np.float64)
        big_r = self.sphere_radius_mm
        inside = rho <= self.base_radius_mm
        z = np.sqrt(np.clip(big_r**2 - rho**2, 0.0, None)) - (big_r - self.height_mm)
        return np.where(inside, np.clip(z, 0.0, None), 0.0)

    def volume_ml(self) -> float:
        a, h = self.base_radius_mm, self.height_mm
        return math.pi * h * (3 * a * a + h * h) / 6.0 / 1000.0

    def scaled(self, remaining: float):
        if remaining <= 0:
            return replace(self, height_mm=0.0)
        if remaining >= 1:
            return self
        target = remaining * self.volume_ml()
        a = self.base_radius_mm
        h = brentq(lambda h: math.pi * h * (3 * a * a + h * h) / 6000.0 - target, 0.0, self.height_mm, xtol=1e-12)
        return replace(self, height_mm=h)


@dataclass(frozen=True)
class Smear:
    """Thin layer of uniform height over a disc or annulus."""

    radius_mm: float
    height_mm: float
    offset_mm: tuple = (0.0, 0.0)
    color: tuple = (178, 44, 36)
    inner_radius_mm: float = 0.0
    name: str = "smear"

    @property
    def outer_mm(self) -> float:
        return self.radius_mm

    @property
    def inner_mm(self) -> float:
        return self.inner_radius_mm

    def height(self, rho):
        return np.where((rho <= self.radius_mm) & (rho >= self.inner_radius_mm), self.height_mm, 0.0)

    def volume_ml(self) -> float:
        return math.pi * (self.radius_mm**2 - self.inner_radius_mm**2) * self.height_mm / 1000.0

    def scaled(self, remaining: float):
        return replace(self, height_mm=self.height_mm * remaining)


Food = Union[Cylinder, SphericalCap, Smear]


@dataclass(frozen=True)
class PlateSpec:
    center_px: tuple = (80.0, 60.0)
    radius_px: float = 55.0
    diameter_mm: float = 259.0
    table_depth_mm: float = 700.0
    plate_height_mm: float = 15.0

    @property
    def dx_mm_per_px(self) -> float:
        return self.diameter_mm / (2.0 * self.radius_px)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 160
    height: int = 120
    plate: PlateSpec = PlateSpec()
    foods: tuple = ()
    tilt: tuple = (0.0, 0.0)  # mm per px in x and y, plate acquisition only
    noise_sigma_mm: float = 0.0
    n_frames: int = 10
    calib_offset_px: tuple = (0.0, 0.0)  # calibration plate centre relative to food plate
    seed: int = 0
    scene_id: str = "synth"
    food_id: str = ""
    quantize: bool = True  # round depth to the 0.1 mm storage resolution
    supersample: int = 4


class RenderedScene(NamedTuple):
    record: SceneRecord
    truth: dict


def _check_foods(spec: SceneSpec) -> None:
    plate_r = spec.plate.diameter_mm / 2.0
    foods = list(spec.foods)
    for f in foods:
        if math.hypot(*f.offset_mm) + f.outer_mm > plate_r + 1e-9:
            raise ConfigError(f"food {f.name!r} extends outside the plate")
        if f.height_mm < 0:
            raise ConfigError(f"food {f.name!r} has negative height")
    for i, a in enumerate(foods):
        for b in foods[i + 1 :]:
            d = math.hypot(a.offset_mm[0] - b.offset_mm[0], a.offset_mm[1] - b.offset_mm[1])
            apart = d >= a.outer_mm + b.outer_mm
            in_hole = d + b.outer_mm <= a.inner_mm or d + a.outer_mm <= b.inner_mm
            if not (apart or in_hole):
                raise ConfigError(f"foods {a.name!r} and {b.name!r} overlap")


def _height_field(spec: SceneSpec, xs, ys, centre) -> tuple[np.ndarray, np.ndarray]:
    """Food height (mm) and index of the food present (-1 for none)."""
    dx = spec.plate.dx_mm_per_px
    height = np.zeros(np.broadcast(xs, ys).shape)
    which = np.full(height.shape, -1)
    for i, f in enumerate(spec.foods):
        fx = centre[0] + f.offset_mm[0] / dx
        fy = centre[1] + f.offset_mm[1] / dx
        rho = np.hypot(xs - fx, ys - fy) * dx
        h = f.height(rho)
        on = h > 0
        height = np.where(on, h, height)
        which = np.where(on, i, which)
    return height, which


def _render_rgb(spec: SceneSpec, centre, with_food: bool) -> np.ndarray:
    ss = spec.supersample
    h, w = spec.height, spec.width
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(h)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(w)[:, None] + sub[None, :]).ravel()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.empty(yy.shape + (3,))
    img[:] = TABLE_RGB
    on_plate = np.hypot(xx - centre[0], yy - centre[1]) <= spec.plate.radius_px
    img[on_plate] = PLATE_RGB
    if with_food and spec.foods:
        _, which = _height_field(spec, xx, yy, centre)
        for i, f in enumerate(spec.foods):
            img[which == i] = f.color
    img = img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _seeds(spec: SceneSpec, heights: np.ndarray):
    from .graphcut import ScribbleSet

    h, w = spec.height, spec.width
    cx, cy = spec.plate.center_px
    dx = spec.plate.dx_mm_per_px
    fg = np.zeros((h, w), bool)
    for f in spec.foods:
        if f.height_mm <= 0:
            continue
        fx, fy = cx + f.offset_mm[0] / dx, cy + f.offset_mm[1] / dx
        r_px = f.outer_mm / dx
        if f.inner_mm > 0:
            # stroke across the ring itself
            mid = 0.5 * (f.outer_mm + f.inner_mm) / dx
            half = max(0.25 * (f.outer_mm - f.inner_mm) / dx, 0.5)
            x0, x1 = fx + mid - half, fx + mid + half
        else:
            x0, x1 = fx - 0.6 * r_px, fx + 0.6 * r_px
        row = int(round(fy))
        cols = np.arange(int(math.ceil(x0)), int(math.floor(x1)) + 1)
        cols = cols[(cols >= 0) & (cols < w)]
        if 0 <= row < h:
            fg[row, cols] = True
    fg &= heights > 0

    # wavy background stroke over the plate rim and the table, top to right
    r = spec.plate.radius_px
    bg = np.zeros((h, w), bool)
    t = np.linspace(-math.pi / 2, 0.0, 400)
    for rad in (0.92 * r, r + 3.0):
        wob = rad + 1.5 * np.sin(8 * t)
        px = np.rint(cx + wob * np.cos(t)).astype(int)
        py = np.rint(cy + wob * np.sin(t)).astype(int)
        ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        bg[py[ok], px[ok]] = True
    from scipy import ndimage as ndi

    bg &= ~ndi.binary_dilation(heights > 0, iterations=2)
    return ScribbleSet(BinaryMask(fg), BinaryMask(bg), validate=False)


def render(spec: SceneSpec, portion_index: int = 1, full_portion_ref: str | None = None) -> RenderedScene:
    """Render plate and calibration acquisitions plus analytic truth."""
    _check_foods(spec)
    if spec.n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    h, w = spec.height, spec.width
    p = spec.plate
    cx, cy = p.center_px
    ccx, ccy = cx + spec.calib_offset_px[0], cy + spec.calib_offset_px[1]
    if (
        cx - p.radius_px < 0
        or cy - p.radius_px < 0
        or cx + p.radius_px > w - 1
        or cy + p.radius_px > h - 1
    ):
        raise ConfigError("plate does not fit inside the image")

    yy, xx = np.indices((h, w), dtype=np.float64)
    heights, _ = _height_field(spec, xx, yy, (cx, cy))
    on_plate = np.hypot(xx - cx, yy - cy) <= p.radius_px
    on_calib = np.hypot(xx - ccx, yy - ccy) <= p.radius_px
    tilt = spec.tilt[0] * (xx - cx) + spec.tilt[1] * (yy - cy)
    plate_clean = p.table_depth_mm - p.plate_height_mm * on_plate - heights + tilt
    calib_clean = p.table_depth_mm - p.plate_height_mm * on_calib

    rng = np.random.default_rng(spec.seed)

    def frames(clean):
        out = []
        for _ in range(spec.n_frames):
            d = clean + (rng.normal(0.0, spec.noise_sigma_mm, clean.shape) if spec.noise_sigma_mm > 0 else 0.0)
            if spec.quantize:
                d = np.rint(d * 10.0) / 10.0
            out.append(DepthMap(np.clip(d, 0.1, None)))
        return out

    plate_frames = frames(plate_clean)
    calib_frames = frames(calib_clean)
    gt = BinaryMask(heights > 0)
    scene_id = spec.scene_id
    record = SceneRecord(
        scene_id=scene_id,
        food_id=spec.food_id or scene_id,
        portion_index=portion_index,
        rgb=RasterImage(_render_rgb(spec, (cx, cy), True)),
        plate_depth_frames=plate_frames,
        calib_depth_frames=calib_frames,
        full_portion_ref=full_portion_ref or scene_id,
        gt_mask=gt,
        calib_rgb=RasterImage(_render_rgb(spec, (ccx, ccy), False)),
        seeds=_seeds(spec, heights),
    )
    volumes = {f.name: f.volume_ml() for f in spec.foods}
    truth = {
        "volume_ml": volumes,
        "total_volume_ml": math.fsum(volumes.values()),
        "gt_mask": gt,
        "circle": PlateCircle(cx, cy, p.radius_px),
        "calib_circle": PlateCircle(ccx, ccy, p.radius_px),
        "dx_mm_per_px": p.dx_mm_per_px,
        "heights_mm": heights,
        "plate_depth_clean": plate_clean,
    }
    return RenderedScene(record, truth)


def render_portion_sequence(spec: SceneSpec, removal_fractions: Sequence[float] = (0, 0.25, 0.5, 0.75, 1.0)) -> list[RenderedScene]:
    """P1..Pk scenes with each food reduced to (1 - fraction) of its volume."""
    fr = [float(f) for f in removal_fractions]
    if not fr or len(fr) > 5:
        raise ConfigError("need between 1 and 5 removal fractions")
    if any(not 0.0 <= f <= 1.0 for f in fr):
        raise ConfigError("removal fractions must lie in [0, 1]")
    if any(b < a for a, b in zip(fr, fr[1:])):
        raise ConfigError("removal fractions must be ascending")
    if fr[0] != 0.0:
        raise ConfigError("the first portion (P1) must be the full plate (fraction 0)")
    ref_id = f"{spec.scene_id}_P1"
    out = []
    for k, f in enumerate(fr, start=1):
        foods = tuple(food.scaled(1.0 - f) for food in spec.foods)
        foods = tuple(food for food in foods if food.height_mm > 0)
        s = replace(spec, foods=foods, scene_id=f"{spec.scene_id}_P{k}", food_id=spec.food_id or spec.scene_id, seed=spec.seed + k - 1)
        rs = render(s, portion_index=k, full_portion_ref=ref_id)
        # keep eaten foods listed at zero volume so sequences line up
        vols = {food.name: 0.0 for food in spec.foods}
        vols.update(rs.truth["volume_ml"])
        rs.truth["volume_ml"] = vols
        rs.truth["removal_fraction"] = f
        out.append(rs)
    return out


def truth_json(truth: dict) -> dict:
    c = truth["circle"]
    cc = truth["calib_circle"]
    out = {
        "volume_ml": dict(sorted(truth["volume_ml"].items())),
        "total_volume_ml": truth["total_volume_ml"],
        "plate_circle": {"cx": c.cx, "cy": c.cy, "r": c.r_hat},
        "calib_circle": {"cx": cc.cx, "cy": cc.cy, "r": cc.r_hat},
        "dx_mm_per_px": truth["dx_mm_per_px"],
        "gt_pixel_count": truth["gt_mask"].count,
    }
    if "removal_fraction" in truth:
        out["removal_fraction"] = truth["removal_fraction"]
    return out


def write_rendered(rs: RenderedScene, path) -> Path:
    root = write_scene(rs.record, path)
    (root / "truth.json").write_text(json.dumps(truth_json(rs.truth), indent=2) + "\n")
    return root


def read_truth(path) -> dict:
    return json.loads((Path(path) / "truth.json").read_text())


# ---------------------------------------------------------------- presets


def default_spec(kind: str = "mixed", scale: float = 1.0, **kw) -> SceneSpec:
    """Ready-made scenes at 120x160 (scale multiplies the resolution)."""
    plate = PlateSpec(center_px=(80.0 * scale + 0.5 * (scale - 1), 60.0 * scale + 0.5 * (scale - 1)), radius_px=55.0 * scale)
    presets = {
        "cylinder": (Cylinder(40.0, 25.0, (-10.0, 5.0), name="cylinder"),),
        "cap": (SphericalCap(50.0, 30.0, (5.0, 0.0), name="cap"),),
        "smear": (Smear(70.0, 4.0, (0.0, 0.0), name="sauce"),),
        "mixed": (
            SphericalCap(35.0, 30.0, (-45.0, -20.0), name="potato"),
            Cylinder(25.0, 20.0, (45.0, 30.0), name="meatloaf"),
            Smear(28.0, 4.0, (30.0, -55.0), name="sauce"),
        ),
        "empty": (),
    }
    if kind not in presets:
        raise ConfigError(f"unknown preset {kind!r}; choose from {sorted(presets)}")
    base = dict(width=int(160 * scale), height=int(120 * scale), plate=plate, foods=presets[kind], scene_id=kind)
    base.update(kw)
    return SceneSpec(**base)
