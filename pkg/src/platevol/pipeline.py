"""Per-scene measurement, method-variant evaluation over a dataset."""

from __future__ import annotations

import json
import logging
import math
import os
import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .errors import ConfigError, DataError, DimensionMismatch, MaskProviderFailure, MissingMask, MissingReference
from .graphcut import graphcut_segment
from .imaging import PlateCircle, SlicConfig, canny, median_filter_5x5, slic, superpixel_boundaries
from .model import (
    BinaryMask,
    HeightMap,
    IntakeReport,
    SceneRecord,
    average_depth_frames,
    find_scene_dirs,
    load_scene,
    read_mask,
    write_mask,
    write_report,
    write_rgb,
    RasterImage,
)
from .plate import (
    PLATE_DIAMETER_MM,
    CorrectionReport,
    PixelScale,
    RegistrationTransform,
    TiltCorrectionConfig,
    compute_height_map,
    detect_plate,
    pixel_scale,
    register,
    tilt_correct,
)
from .refine import RefineConfig, clip_to_plate, refine_mask
from .volume import VolumeResult, food_volume, intake

log = logging.getLogger(__name__)

WORKERS_ENV = "PLATEVOL_WORKERS"
MASK_SOURCES = ("gt_file", "external_command", "graphcut")
_SOURCE_TAG = {"gt_file": "GT", "external_command": "EXT", "graphcut": "GC"}


@dataclass(frozen=True)
class PipelineConfig:
    mask_source: str = "gt_file"
    external_command: Optional[str] = None
    refine: bool = True
    r_min: int = 40
    r_max: int = 60
    canny_sigma: float = 3.0
    canny_low: float = 10.0
    canny_high: float = 50.0
    min_vote_fraction: float = 0.25
    refine_cfg: RefineConfig = RefineConfig()
    compactness: float = 20.0
    slic_sigma: float = 2.0
    tilt: TiltCorrectionConfig = TiltCorrectionConfig()
    median_filter: bool = True
    plate_diameter_mm: float = PLATE_DIAMETER_MM
    gc_lambda: float = 1.0
    gc_sigma: float = 30.0
    downsample: int = 1
    output_format: str = "csv"
    provider_concurrency: int = 1

    def __post_init__(self):
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.mask_source == "external_command" and not self.external_command:
            raise ConfigError("mask_source=external_command needs external_command")
        if not 1 <= self.r_min <= self.r_max:
            raise ConfigError(f"empty plate radius range [{self.r_min}, {self.r_max}]")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if self.output_format not in ("csv", "json"):
            raise ConfigError("output_format must be csv or json")
        if not self.plate_diameter_mm > 0:
            raise ConfigError("plate diameter must be positive")
        if self.provider_concurrency < 1:
            raise ConfigError("provider_concurrency must be >= 1")

    @property
    def method_tag(self) -> str:
        return _SOURCE_TAG[self.mask_source] + ("-D" if self.refine else "")

    @property
    def slic_cfg(self) -> SlicConfig:
        return SlicConfig(self.refine_cfg.n_superpixels, self.compactness, self.slic_sigma)


# ---------------------------------------------------------------- mask providers

_provider_lock = threading.Lock()
_provider_slots: dict[int, threading.BoundedSemaphore] = {}


def _slots(n: int) -> threading.BoundedSemaphore:
    with _provider_lock:
        return _provider_slots.setdefault(n, threading.BoundedSemaphore(n))


def external_mask(command: str, rgb_path, expected_shape=None, concurrency: int = 1) -> BinaryMask:
    """Run a mask provider and read the mask whose path it prints.

    ``{rgb}`` in the command is replaced by the image path; without the
    placeholder the path is appended. The last non-empty stdout line names
    the mask file.
    """
    quoted = shlex.quote(str(rgb_path))
    cmd = command.replace("{rgb}", quoted) if "{rgb}" in command else f"{command} {quoted}"
    with _slots(concurrency):
        try:
            proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True, check=False)
        except OSError as exc:
            raise MaskProviderFailure(f"could not start mask provider: {exc}", str(exc)) from exc
    if proc.returncode != 0:
        raise MaskProviderFailure(f"mask provider exited with status {proc.returncode}", proc.stderr)
    lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
    if not lines:
        raise MaskProviderFailure("mask provider printed no mask path", proc.stderr)
    try:
        mask = read_mask(lines[-1])
    except (OSError, ValueError) as exc:
        raise MaskProviderFailure(f"unreadable mask {lines[-1]!r}: {exc}", proc.stderr) from exc
    if expected_shape is not None and tuple(mask.shape) != tuple(expected_shape):
        raise DimensionMismatch(f"provider mask is {mask.shape}, scene is {tuple(expected_shape)}")
    return mask


# ---------------------------------------------------------------- measurement


@dataclass
class SceneMeasurement:
    scene_id: str
    circle: PlateCircle
    calib_circle: PlateCircle
    transform: RegistrationTransform
    scale: PixelScale
    heights: HeightMap
    mask: BinaryMask  # acquired and clipped, before refinement
    volume: VolumeResult
    refined_mask: Optional[BinaryMask] = None
    refined_volume: Optional[VolumeResult] = None
    gt_volume: Optional[VolumeResult] = None
    correction: CorrectionReport = field(default_factory=CorrectionReport)

    def variant(self, refined: bool) -> tuple[BinaryMask, VolumeResult]:
        if refined:
            if self.refined_mask is None:
                raise ValueError("refinement was not computed for this measurement")
            return self.refined_mask, self.refined_volume
        return self.mask, self.volume


def acquire_mask(scene: SceneRecord, cfg: PipelineConfig, circle: PlateCircle) -> BinaryMask:
    if cfg.mask_source == "gt_file":
        if scene.gt_mask is None:
            raise MissingMask(f"{scene.scene_id}: no gt_mask.png for mask_source=gt_file")
        return scene.gt_mask
    if cfg.mask_source == "graphcut":
        if scene.seeds is None:
            raise MissingMask(f"{scene.scene_id}: no seeds_fg.png/seeds_bg.png for graph cut")
        if not scene.seeds.fg.data.any():
            # no food stroke drawn: the annotator saw no food
            return BinaryMask.empty(scene.shape)
        return graphcut_segment(scene.rgb, scene.seeds, circle, cfg.gc_lambda, cfg.gc_sigma)
    with tempfile.TemporaryDirectory(prefix="platevol-") as tmp:
        rgb_path = Path(tmp) / f"{scene.scene_id}.png"
        write_rgb(rgb_path, scene.rgb)
        return external_mask(cfg.external_command, rgb_path, scene.shape, cfg.provider_concurrency)


def measure_scene(
    scene: SceneRecord,
    cfg: PipelineConfig,
    with_refined: Optional[bool] = None,
    debug_dir=None,
) -> SceneMeasurement:
    """Plate geometry, height map, masks and volumes for one scene."""
    with_refined = cfg.refine if with_refined is None else with_refined
    detect = dict(sigma=cfg.canny_sigma, low=cfg.canny_low, high=cfg.canny_high, min_vote_fraction=cfg.min_vote_fraction)
    circle = detect_plate(scene.rgb, cfg.r_min, cfg.r_max, **detect)
    calib_circle = detect_plate(scene.calib_rgb, cfg.r_min, cfg.r_max, **detect) if scene.calib_rgb is not None else circle
    t = register(calib_circle, circle)

    d_plate = average_depth_frames(scene.plate_depth_frames)
    d_calib = average_depth_frames(scene.calib_depth_frames)
    hm = compute_height_map(d_calib, d_plate, t)
    correction = CorrectionReport()
    hm = tilt_correct(hm, circle, cfg.tilt, report=correction)
    if cfg.median_filter:
        hm = median_filter_5x5(hm)
    scale = pixel_scale(circle, cfg.plate_diameter_mm)

    mask = clip_to_plate(acquire_mask(scene, cfg, circle), circle)
    m = SceneMeasurement(
        scene.scene_id, circle, calib_circle, t, scale, hm, mask, food_volume(mask, hm, scale), correction=correction
    )
    sp = None
    if with_refined:
        sp = slic(scene.rgb, cfg.slic_cfg)
        m.refined_mask = refine_mask(mask, hm, sp, cfg.refine_cfg)
        m.refined_volume = food_volume(m.refined_mask, hm, scale)
    if scene.gt_mask is not None:
        m.gt_volume = food_volume(scene.gt_mask, hm, scale)
    if debug_dir is not None:
        _dump_debug(Path(debug_dir), scene, cfg, m, sp)
    return m


def _dump_debug(root: Path, scene: SceneRecord, cfg: PipelineConfig, m: SceneMeasurement, sp) -> None:
    root.mkdir(parents=True, exist_ok=True)
    sid = scene.scene_id
    edges = canny(scene.rgb, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
    write_mask(root / f"{sid}_edges.png", edges)
    if sp is not None:
        write_mask(root / f"{sid}_superpixels.png", BinaryMask(superpixel_boundaries(sp)))
        overlay = scene.rgb.as_rgb().copy()
        removed = m.mask.data & ~m.refined_mask.data
        overlay[m.refined_mask.data] = (overlay[m.refined_mask.data] // 2) + np.array([0, 127, 0], np.uint8)
        overlay[removed] = (overlay[removed] // 2) + np.array([127, 0, 0], np.uint8)
        write_rgb(root / f"{sid}_refined_overlay.png", RasterImage(overlay))
    (root / f"{sid}_correction.json").write_text(json.dumps(m.correction.to_dict(), indent=2) + "\n")


def _report(scene: SceneRecord, tag: str, mask: BinaryMask, vol: VolumeResult, ref_vol: float) -> IntakeReport:
    res = intake(ref_vol, vol)
    return IntakeReport(
        scene_id=scene.scene_id,
        method_tag=tag,
        plate_volume_ml=vol.volume_ml,
        intake_ml=res.intake_ml,
        intake_percent=res.intake_percent,
        mask_pixel_count=mask.count,
        food_id=scene.food_id,
        portion_index=scene.portion_index,
        flags=res.flags,
    )


def run_scene(scene: SceneRecord, cfg: PipelineConfig, reference=None, debug_dir=None) -> IntakeReport:
    """Measure one plate and its intake against the full-portion reference.

    ``reference`` may be the P1 SceneRecord, its VolumeResult or a volume in
    mL; it is ignored when the scene is its own reference.
    """
    m = measure_scene(scene, cfg, debug_dir=debug_dir)
    mask, vol = m.variant(cfg.refine)
    if scene.is_reference:
        ref_vol = vol.volume_ml
    elif reference is None:
        raise MissingReference(f"{scene.scene_id}: reference plate {scene.full_portion_ref!r} not supplied")
    elif isinstance(reference, SceneRecord):
        if reference.scene_id != scene.full_portion_ref:
            raise MissingReference(f"{scene.scene_id}: expected reference {scene.full_portion_ref!r}, got {reference.scene_id!r}")
        ref_vol = measure_scene(reference, cfg).variant(cfg.refine)[1].volume_ml
    elif isinstance(reference, VolumeResult):
        ref_vol = reference.volume_ml
    else:
        ref_vol = float(reference)
    return _report(scene, cfg.method_tag, mask, vol, ref_vol)


# ---------------------------------------------------------------- datasets


@dataclass
class EvalResult:
    reports: list  # IntakeReport, variant-major then scene order
    plates: dict  # method tag -> list of per-plate metric dicts
    table: list  # summary rows
    stats: dict  # method tag -> metrics.ErrorStats

    def report_bytes(self, fmt: str = "csv") -> bytes:
        return write_report(self.reports, fmt)

    def table_bytes(self) -> bytes:
        return metrics.table_csv(self.table)

    def plates_json(self) -> bytes:
        def clean(v):
            if isinstance(v, float):
                return None if math.isnan(v) else round(v, 6) + 0.0
            return v

        doc = {tag: [{k: clean(v) for k, v in p.items()} for p in rows] for tag, rows in self.plates.items()}
        return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def _ordered_map(fn, items):
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_dataset(root, downsample: int = 1) -> list[SceneRecord]:
    dirs = find_scene_dirs(root)
    if not dirs:
        raise DataError(f"{root}: no scene directories (manifest.json) found")
    scenes = _ordered_map(lambda d: load_scene(d, downsample), dirs)
    ids = [s.scene_id for s in scenes]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"duplicate scene ids: {dupes}")
    return scenes


def _plate_row(scene, mask, vol, ref_scene, ref_mask, ref_vol, m, ref_m) -> dict:
    row = {
        "scene_id": scene.scene_id,
        "food_id": scene.food_id,
        "portion_index": scene.portion_index,
        "pred_pixels": mask.count,
        "pred_vol": vol.volume_ml,
        "pred_intake": ref_vol.volume_ml - vol.volume_ml,
    }
    gt, ref_gt = scene.gt_mask, ref_scene.gt_mask
    c = metrics.confusion(mask, gt)
    row["gt_pixels"] = gt.count
    row["gsa"] = metrics.global_accuracy(c)
    row["fsa"] = metrics.food_seg_accuracy(c)
    row["iou"] = metrics.iou(c, None)
    row["gt_vol"] = m.gt_volume.volume_ml
    row["gt_intake"] = ref_m.gt_volume.volume_ml - m.gt_volume.volume_ml
    full_gt_vol = ref_m.gt_volume.volume_ml
    row["seg_err_2d_pct"] = metrics.intake_error_2d(mask, gt, ref_gt) if ref_gt.count else math.nan
    # remaining food judged by area (2D) or by volume (3D), against the gt volume fraction
    if full_gt_vol > 0:
        gt_frac = m.gt_volume.volume_ml / full_gt_vol
        row["intake_err_2d_pct"] = (
            metrics.intake_error(mask.count / ref_mask.count, gt_frac, 1.0) if ref_mask.count else math.nan
        )
        row["intake_err_3d_pct"] = metrics.intake_error_3d(vol.volume_ml, m.gt_volume.volume_ml, full_gt_vol)
    else:
        row["intake_err_2d_pct"] = row["intake_err_3d_pct"] = math.nan
    return row


def evaluate_dataset(root, configs, scenes: Optional[Sequence[SceneRecord]] = None) -> EvalResult:
    """Run every method variant over every scene and aggregate metrics.

    ``configs`` is one PipelineConfig or a sequence of them (one per
    variant). Each scene's intake is taken against the scene named by its
    ``full_portion_ref``.
    """
    cfgs = [configs] if isinstance(configs, PipelineConfig) else list(configs)
    if not cfgs:
        raise ConfigError("no method variants to evaluate")
    tags = [c.method_tag for c in cfgs]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate method variants: {tags}")
    if len({c.downsample for c in cfgs}) != 1:
        raise ConfigError("all variants must share one downsample factor")
    if scenes is None:
        scenes = load_dataset(root, cfgs[0].downsample)
    by_id = {s.scene_id: s for s in scenes}
    for s in scenes:
        if s.full_portion_ref not in by_id:
            raise MissingReference(f"{s.scene_id}: no reference plate {s.full_portion_ref!r} for food {s.food_id!r}")

    # one measurement pass per distinct mask source; refinement shared across -D variants
    groups: dict[PipelineConfig, bool] = {}
    for c in cfgs:
        base = replace(c, refine=False)
        groups[base] = groups.get(base, False) or c.refine
    measured: dict[PipelineConfig, list[SceneMeasurement]] = {}
    for base, want_refined in groups.items():
        measured[base] = _ordered_map(lambda s: measure_scene(s, base, with_refined=want_refined), list(scenes))

    index = {s.scene_id: i for i, s in enumerate(scenes)}
    reports, plates, table, stats = [], {}, [], {}
    for c in cfgs:
        ms = measured[replace(c, refine=False)]
        rows = []
        for s, m in zip(scenes, ms):
            ref_m = ms[index[s.full_portion_ref]]
            mask, vol = m.variant(c.refine)
            ref_mask, ref_vol = ref_m.variant(c.refine)
            reports.append(_report(s, c.method_tag, mask, vol, ref_vol.volume_ml))
            if s.gt_mask is not None and by_id[s.full_portion_ref].gt_mask is not None:
                rows.append(_plate_row(s, mask, vol, by_id[s.full_portion_ref], ref_mask, ref_vol, m, ref_m))
        plates[c.method_tag] = rows
        if rows:
            table.append(metrics.summarize(c.method_tag, rows))
            stats[c.method_tag] = metrics.error_stats(
                [(p["pred_vol"], p["gt_vol"], p["pred_intake"], p["gt_intake"]) for p in rows]
            )
    if not any(plates.values()):
        raise MissingMask("no scene with a ground-truth mask to evaluate against")
    return EvalResult(reports, plates, table, stats)


def find_reference_dir(scene_dir, ref_id: str) -> Path:
    """Locate the sibling scene directory whose manifest declares ``ref_id``."""
    scene_dir = Path(scene_dir)
    for d in find_scene_dirs(scene_dir.parent):
        try:
            if json.loads((d / "manifest.json").read_text()).get("scene_id") == ref_id:
                return d
        except (OSError, ValueError):
            continue
    raise MissingReference(f"reference plate {ref_id!r} not found next to {scene_dir}")
