"""Command line entry point: ``platevol {run,eval,synth,seeds-check}``.

Exit codes: 0 ok, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import synth
from .errors import ConfigError, DataError
from .model import load_scene, write_report
from .pipeline import PipelineConfig, evaluate_dataset, find_reference_dir, measure_scene, run_scene
from .plate import TiltCorrectionConfig
from .refine import RefineConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _add_pipeline_flags(p: argparse.ArgumentParser, multi_source: bool = False) -> None:
    g = p.add_argument_group("pipeline")
    if multi_source:
        g.add_argument("--mask-source", action="append", choices=["gt_file", "external_command", "graphcut"],
                       help="mask source; repeat to compare several (default gt_file)")
        g.add_argument("--variants", choices=["both", "refined", "unrefined"], default="both")
    else:
        g.add_argument("--mask-source", default="gt_file", choices=["gt_file", "external_command", "graphcut"])
        g.add_argument("--refine", action=argparse.BooleanOptionalAction, default=True,
                       help="apply superpixel depth refinement")
    g.add_argument("--external-command", help="mask provider command; {rgb} is replaced by the image path")
    g.add_argument("--r-min", type=int, default=40, help="smallest plate radius searched (px)")
    g.add_argument("--r-max", type=int, default=60, help="largest plate radius searched (px)")
    g.add_argument("--canny-sigma", type=float, default=3.0)
    g.add_argument("--canny-low", type=float, default=10.0)
    g.add_argument("--canny-high", type=float, default=50.0)
    g.add_argument("--min-votes", type=float, default=0.25, help="Hough vote fraction needed to accept a plate")
    g.add_argument("--quantile", type=float, default=0.75, help="refinement quantile level p")
    g.add_argument("--tau", type=float, default=2.0, help="refinement height threshold (mm)")
    g.add_argument("--superpixels", type=int, default=250)
    g.add_argument("--compactness", type=float, default=20.0)
    g.add_argument("--slic-sigma", type=float, default=2.0)
    g.add_argument("--table-margin", type=float, default=5.0, help="px outside the plate treated as table")
    g.add_argument("--min-table-pixels", type=int, default=3)
    g.add_argument("--no-median", action="store_true", help="skip the 5x5 median filter")
    g.add_argument("--plate-diameter", type=float, default=259.0, help="plate diameter (mm)")
    g.add_argument("--gc-lambda", type=float, default=1.0)
    g.add_argument("--gc-sigma", type=float, default=30.0)
    g.add_argument("--downsample", type=int, default=1, help="integer block-downsampling factor on load")
    g.add_argument("--provider-concurrency", type=int, default=1)
    g.add_argument("--format", dest="output_format", choices=["csv", "json"], default="csv")


def _config(args, mask_source: str, refine: bool) -> PipelineConfig:
    return PipelineConfig(
        mask_source=mask_source,
        external_command=args.external_command,
        refine=refine,
        r_min=args.r_min,
        r_max=args.r_max,
        canny_sigma=args.canny_sigma,
        canny_low=args.canny_low,
        canny_high=args.canny_high,
        min_vote_fraction=args.min_votes,
        refine_cfg=RefineConfig(args.quantile, args.tau, args.superpixels),
        compactness=args.compactness,
        slic_sigma=args.slic_sigma,
        tilt=TiltCorrectionConfig(args.table_margin, args.min_table_pixels),
        median_filter=not args.no_median,
        plate_diameter_mm=args.plate_diameter,
        gc_lambda=args.gc_lambda,
        gc_sigma=args.gc_sigma,
        downsample=args.downsample,
        output_format=args.output_format,
        provider_concurrency=args.provider_concurrency,
    )


def _emit(data: bytes, out) -> None:
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
        sys.stdout.flush()


def cmd_run(args) -> int:
    cfg = _config(args, args.mask_source, args.refine)
    scene = load_scene(args.scene, cfg.downsample)
    reference = None
    if not scene.is_reference:
        ref_dir = args.reference or find_reference_dir(args.scene, scene.full_portion_ref)
        reference = load_scene(ref_dir, cfg.downsample)
    report = run_scene(scene, cfg, reference, debug_dir=args.debug_dir)
    if args.verbose:
        m = measure_scene(scene, cfg)
        info = {
            "plate_circle": {"cx": m.circle.cx, "cy": m.circle.cy, "r": m.circle.r_hat},
            "registration": {"tx": m.transform.tx, "ty": m.transform.ty},
            "dx_mm_per_px": m.scale.dx_mm_per_px,
            "tilt_correction": m.correction.to_dict(),
        }
        print(json.dumps(info, indent=2), file=sys.stderr)
    _emit(write_report([report], cfg.output_format), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    sources = args.mask_source or ["gt_file"]
    refine_flags = {"both": [False, True], "refined": [True], "unrefined": [False]}[args.variants]
    cfgs = [_config(args, s, r) for s in dict.fromkeys(sources) for r in refine_flags]
    result = evaluate_dataset(args.root, cfgs)
    fmt = cfgs[0].output_format
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"reports.{fmt}").write_bytes(result.report_bytes(fmt))
        (out / "table1.csv").write_bytes(result.table_bytes())
        (out / "plates.json").write_bytes(result.plates_json())
    else:
        _emit(result.table_bytes(), None)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    kw = dict(noise_sigma_mm=args.noise, tilt=tuple(args.tilt), calib_offset_px=tuple(args.calib_offset), seed=args.seed)
    spec = synth.default_spec(args.preset, scale=args.scale, **kw)
    if args.scene_id:
        spec = dataclasses.replace(spec, scene_id=args.scene_id)
    if args.fractions:
        rendered = synth.render_portion_sequence(spec, args.fractions)
    else:
        rendered = [synth.render(spec)]
    for rs in rendered:
        path = synth.write_rendered(rs, out / rs.record.scene_id)
        print(path)
    return EXIT_OK


def cmd_seeds_check(args) -> int:
    bad = 0
    for d in args.scenes:
        scene = load_scene(d)
        if scene.seeds is None:
            print(f"{d}: missing seeds_fg.png / seeds_bg.png")
            bad += 1
            continue
        problems = scene.seeds.problems()
        fg, bg = scene.seeds.fg.count, scene.seeds.bg.count
        if problems:
            bad += 1
            print(f"{d}: " + "; ".join(problems))
        else:
            print(f"{d}: ok ({fg} foreground, {bg} background seed pixels)")
    return EXIT_DATA if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platevol", description="Food volume and intake from RGB-D plate scenes.")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="measure a single scene")
    p.add_argument("scene", help="scene directory")
    p.add_argument("--reference", help="full-portion (P1) scene directory; found by id next to the scene if omitted")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--debug-dir", help="dump edge, superpixel and refinement PNGs here")
    p.add_argument("-v", "--verbose", action="store_true", help="print plate geometry and tilt-correction report")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate method variants over a dataset")
    p.add_argument("root", help="directory containing scene directories")
    p.add_argument("--out-dir", help="write reports, table1.csv and plates.json here")
    _add_pipeline_flags(p, multi_source=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("out_dir")
    p.add_argument("--preset", default="mixed", choices=["mixed", "cylinder", "cap", "smear", "empty"])
    p.add_argument("--fractions", type=float, nargs="+", help="removal fractions for a P1..P5 sequence, e.g. 0 .25 .5 .75 1")
    p.add_argument("--noise", type=float, default=1.0, help="depth noise sigma (mm)")
    p.add_argument("--tilt", type=float, nargs=2, default=(0.0, 0.0), metavar=("AX", "AY"), help="mm per px")
    p.add_argument("--calib-offset", type=float, nargs=2, default=(0.0, 0.0), metavar=("DX", "DY"))
    p.add_argument("--scale", type=int, default=1, help="resolution multiplier over 120x160")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-id")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("seeds-check", help="validate graph-cut scribble files")
    p.add_argument("scenes", nargs="+")
    p.set_defaults(func=cmd_seeds_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        stderr = getattr(exc, "stderr", "")
        if stderr:
            print(stderr.rstrip(), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
