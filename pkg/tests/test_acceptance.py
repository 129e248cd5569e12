"""Acceptance criteria. Each test prints one PASS/FAIL line."""

import dataclasses
import itertools
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from platevol import synth
from platevol.graphcut import ScribbleSet, cut_cost, graphcut_segment, make_cut_graph, max_flow
from platevol.imaging import SuperpixelMap
from platevol.metrics import confusion, food_seg_accuracy, global_accuracy, intake_error_2d, intake_error_3d, iou
from platevol.model import BinaryMask, HeightMap, RasterImage, average_depth_frames
from platevol.pipeline import PipelineConfig, measure_scene
from platevol.plate import compute_height_map, register, table_mask, tilt_correct, TiltCorrectionConfig, detect_plate
from platevol.refine import RefineConfig, refine_mask
from platevol.synth import Cylinder, PlateSpec, SceneSpec, Smear, SphericalCap

# 259 mm plate over 2 * 129.5 px gives 1 mm per pixel
MM_PLATE = PlateSpec(center_px=(199.5, 149.5), radius_px=129.5)
MM_CFG = PipelineConfig(r_min=120, r_max=140, refine=True)
ANALYTIC = {
    "cylinder": (Cylinder(40.0, 25.0, (-10.0, 5.0), name="cylinder"),),
    "cap": (SphericalCap(50.0, 30.0, (5.0, 0.0), name="cap"),),
}


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail

    return report


def mm_scene(foods, **kw):
    return synth.render(SceneSpec(width=400, height=300, plate=MM_PLATE, foods=foods, **kw))


def test_01_analytic_volume(verdict):
    worst, slowest, lines = 0.0, 0.0, []
    for name, foods in ANALYTIC.items():
        rs = mm_scene(foods)
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            m = measure_scene(rs.record, MM_CFG)
            times.append(time.perf_counter() - t0)
        truth = rs.truth["total_volume_ml"]
        for v in (m.volume.volume_ml, m.refined_volume.volume_ml):
            worst = max(worst, abs(v - truth) / truth)
        slowest = max(slowest, float(np.median(times)))
        lines.append(f"{name} {m.refined_volume.volume_ml:.2f}/{truth:.2f} mL")
    ok = worst < 0.02 and slowest < 1.0
    verdict(1, "analytic volume recovery", ok, f"{', '.join(lines)}; max rel err {worst:.2%}; {slowest:.2f} s/scene")


def test_02_noise_robustness(verdict):
    worst, ratios = 0.0, []
    for k, (name, foods) in enumerate(ANALYTIC.items()):
        rs = mm_scene(foods, noise_sigma_mm=1.0, seed=100 + k)
        m = measure_scene(rs.record, MM_CFG)
        truth = rs.truth["total_volume_ml"]
        worst = max(worst, abs(m.volume.volume_ml - truth) / truth, abs(m.refined_volume.volume_ml - truth) / truth)
        resid = average_depth_frames(rs.record.plate_depth_frames).data - rs.truth["plate_depth_clean"]
        assert resid.size >= 10_000
        ratios.append(resid.std(ddof=1) / (1.0 / math.sqrt(10)))
    ok = worst < 0.05 and all(abs(r - 1) < 0.15 for r in ratios)
    verdict(2, "noise robustness", ok, f"max rel vol err {worst:.2%}; residual sd / (sigma/sqrt 10) = {', '.join(f'{r:.3f}' for r in ratios)}")


def test_03_tilt_correction(verdict):
    worst = 0.0
    tilts = [(0.05, 0.0), (0.0, 0.05), (-0.05, 0.05), (0.05, -0.05), (0.03, -0.02), (-0.01, 0.04)]
    for k, tilt in enumerate(tilts):
        rs = synth.render(synth.default_spec("mixed", tilt=tilt, calib_offset_px=(2.0, -1.0), seed=k))
        rec = rs.record
        pc = detect_plate(rec.rgb, 40, 60)
        cc = detect_plate(rec.calib_rgb, 40, 60)
        hm = compute_height_map(average_depth_frames(rec.calib_depth_frames), average_depth_frames(rec.plate_depth_frames), register(cc, pc))
        cfg = TiltCorrectionConfig()
        out = tilt_correct(hm, pc, cfg)
        table = table_mask(hm.shape, pc, cfg.table_margin_px) & out.valid
        for y in range(hm.shape[0]):
            row = table[y]
            if row.sum() >= cfg.min_table_pixels_per_row:
                worst = max(worst, float(np.abs(out.data[y, row]).mean()))
    verdict(3, "tilt correction", worst < 0.1, f"{len(tilts)} tilts up to 0.05 mm/px; worst row mean |h| = {worst:.4f} mm")


def test_04_plate_detection(verdict):
    rng = np.random.default_rng(2024)
    hits, worst = 0, 0.0
    h, w = 160, 200
    for i in range(100):
        r = rng.uniform(40, 60)
        cx, cy = rng.uniform(r + 1, w - 2 - r), rng.uniform(r + 1, h - 2 - r)
        plate = PlateSpec(center_px=(cx, cy), radius_px=r)
        a = rng.uniform(15, 40)
        off, th = rng.uniform(0, plate.diameter_mm / 2 - a - 5), rng.uniform(0, 2 * np.pi)
        kind = Cylinder if i % 2 else SphericalCap
        food = kind(a, rng.uniform(5, 30), (off * np.cos(th), off * np.sin(th)))
        rs = synth.render(SceneSpec(width=w, height=h, plate=plate, foods=(food,), n_frames=1, seed=i))
        c = detect_plate(rs.record.rgb, 40, 60)
        err = max(abs(c.cx - cx), abs(c.cy - cy), abs(c.r_hat - r))
        worst = max(worst, err)
        hits += err <= 1.0
    verdict(4, "plate detection", hits >= 99, f"{hits}/100 within 1 px; worst error {worst:.3f} px")


def test_05_discordance(verdict):
    foods = (SphericalCap(45.0, 35.0, (-20.0, 0.0), name="mash"), Smear(30.0, 3.0, (70.0, 0.0), name="sauce"))
    spec = SceneSpec(
        width=400, height=300, plate=MM_PLATE, foods=foods, noise_sigma_mm=1.0,
        tilt=(0.01, -0.02), calib_offset_px=(2.0, -3.0), seed=9, scene_id="smear",
    )
    seq = synth.render_portion_sequence(spec, (0, 0.25, 0.5, 0.75, 1.0))
    ms = [measure_scene(rs.record, MM_CFG) for rs in seq]
    v_full = seq[0].truth["total_volume_ml"]
    ok, parts = True, []
    for k in (1, 2, 3):
        v_true = seq[k].truth["total_volume_ml"]
        true_intake = 100 * (v_full - v_true) / v_full
        # 2D: intake judged from the unrefined mask area relative to P1
        err_2d = 100 * (1 - ms[k].mask.count / ms[0].mask.count) - true_intake
        pred_intake = ms[0].refined_volume.volume_ml - ms[k].refined_volume.volume_ml
        err_3d = 100 * pred_intake / v_full - true_intake
        ok &= abs(err_2d) > abs(err_3d) and abs(err_3d) <= 5.0
        parts.append(f"P{k + 1} 2D {err_2d:+.1f}% vs 3D-D {err_3d:+.1f}%")
    verdict(5, "visual-volume discordance", ok, "; ".join(parts))


def test_06_quantile_refinement(verdict):
    rng = np.random.default_rng(6)
    cfg = RefineConfig(p=0.75, tau_mm=2.0)
    agree, n_cases, n_removed = 0, 500, 0
    for _ in range(n_cases):
        n_seg = int(rng.integers(1, 8))
        sizes = rng.integers(1, 30, n_seg)
        labels = np.repeat(np.arange(n_seg), sizes)
        rng.shuffle(labels)
        # heights straddle tau, with exact ties at tau
        jitter = np.where(rng.random(labels.size) < 0.5, 0.0, rng.normal(0, 0.3, labels.size))
        heights = rng.choice([1.9, 1.99, 2.0, 2.0, 2.01, 2.1], labels.size) + jitter
        mask = rng.random(labels.size) < 0.7
        got = refine_mask(BinaryMask(mask[None]), HeightMap(heights[None]), SuperpixelMap(labels[None], n_seg), cfg).data[0]
        want = mask.copy()
        for s in range(n_seg):
            vals = sorted(heights[labels == s])
            q = vals[math.ceil(0.75 * len(vals)) - 1]
            if q < 2.0:
                want[labels == s] = False
                n_removed += 1
        agree += bool(np.array_equal(got, want))
    verdict(6, "nearest-rank quantile refinement", agree == n_cases, f"{agree}/{n_cases} cases match the sort oracle ({n_removed} superpixels removed)")


def naive_metrics(p, t, full):
    tp = tn = fp = fn = 0
    for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    gsa = (tp + tn) / (tp + tn + fp + fn)
    fsa = tp / (tp + fn) if tp + fn else math.nan
    union = tp + fp + fn
    j = tp / union if union else 1.0
    n_full = sum(full.ravel().tolist())
    e2d = 100.0 * ((tp + fp) - (tp + fn)) / n_full
    return (tp, tn, fp, fn), gsa, fsa, j, e2d


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def test_07_metrics_equivalence(verdict):
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 65, 2))
        p = rng.random(shape) < rng.random()
        t = rng.random(shape) < rng.random()
        full = t | (rng.random(shape) < 0.5)
        full.flat[0] = True
        counts, gsa, fsa, j, e2d = naive_metrics(p, t, full)
        c = confusion(BinaryMask(p), BinaryMask(t))
        vp, vg, vf = rng.uniform(0, 100, 3) + (0, 0, 1)
        ok = (
            (c.tp, c.tn, c.fp, c.fn) == counts
            and global_accuracy(c) == gsa
            and same(food_seg_accuracy(c), fsa)
            and iou(BinaryMask(p), BinaryMask(t)) == j
            and intake_error_2d(BinaryMask(p), BinaryMask(t), BinaryMask(full)) == e2d
            and intake_error_3d(vp, vg, vf) == 100.0 * (vp - vg) / vf
        )
        agree += ok
    verdict(7, "metrics vs per-pixel oracle", agree == 1000, f"{agree}/1000 random mask pairs identical")


def enumerate_min_cut(g):
    h, w = g.shape
    n = h * w
    fg, bg = g.fg_seeds.ravel(), g.bg_seeds.ravel()
    free = np.flatnonzero(~(fg | bg))
    combos = np.array(list(itertools.product([False, True], repeat=free.size)), bool).reshape(2**free.size, free.size)
    a = np.zeros((combos.shape[0], n), bool)
    a[:, fg] = True
    a[:, free] = combos
    cost = (a * g.sink.ravel()).sum(1) + (~a * g.source.ravel()).sum(1)
    idx = np.arange(n).reshape(h, w)
    for u, v, c in ((idx[:, :-1], idx[:, 1:], g.right), (idx[:-1, :], idx[1:, :], g.down)):
        cut = a[:, u.ravel()] != a[:, v.ravel()]
        cost = cost + (cut * c.ravel()).sum(1)
    return float(cost.min())


def random_capacities(rng, shape):
    style = rng.integers(0, 3)
    if style == 0:
        return rng.random(shape) * 5
    if style == 1:
        return rng.integers(0, 4, shape).astype(float)  # many ties and zeros
    return np.where(rng.random(shape) < 0.2, rng.random(shape) * 1e3, rng.random(shape))


def test_08_graphcut_optimality(verdict):
    rng = np.random.default_rng(8)
    exact, seeds_ok, trials = 0, 0, 500
    for _ in range(trials):
        while True:
            h, w = (int(s) for s in rng.integers(1, 5, 2))
            if 2 <= h * w <= 16:
                break
        n = h * w
        role = rng.permutation(n)
        n_seed = int(rng.integers(max(0, n - 12), n + 1))
        n_fg = int(rng.integers(0, n_seed + 1))
        fg = np.zeros(n, bool)
        bg = np.zeros(n, bool)
        fg[role[:n_fg]] = True
        bg[role[n_fg:n_seed]] = True
        g = make_cut_graph(
            random_capacities(rng, (h, w - 1)), random_capacities(rng, (h - 1, w)),
            random_capacities(rng, (h, w)), random_capacities(rng, (h, w)),
            fg.reshape(h, w), bg.reshape(h, w),
        )
        flow, side = max_flow(g)
        best = enumerate_min_cut(g)
        tol = 1e-9 * max(1.0, best)
        exact += abs(flow - best) <= tol and abs(cut_cost(g, side.data) - best) <= tol
        seeds_ok += bool(side.data[g.fg_seeds].all() and not side.data[g.bg_seeds].any())
    # seeds on full segmentations of random images, where likelihoods fight the seeds
    seg_trials = 30
    for _ in range(seg_trials):
        img = RasterImage(rng.integers(0, 256, (16, 20, 3)).astype(np.uint8))
        lab = rng.random((16, 20))
        fg, bg = lab < 0.1, lab > 0.9
        out = graphcut_segment(img, ScribbleSet(BinaryMask(fg), BinaryMask(bg)), lam=float(rng.uniform(0.1, 50))).data
        seeds_ok += bool(out[fg].all() and not out[bg].any())
    ok = exact == trials and seeds_ok == trials + seg_trials
    verdict(8, "graph-cut optimality", ok, f"{exact}/{trials} cuts equal exhaustive minimum; seeds respected in {seeds_ok}/{trials + seg_trials}")


def test_09_eval_determinism(verdict, tmp_path):
    data = tmp_path / "data"
    env = dict(os.environ)
    run = lambda *a: subprocess.run([sys.executable, "-m", "platevol", "-q", *a], env=env, capture_output=True, check=True)
    run("synth", str(data), "--preset", "mixed", "--fractions", "0", "0.5", "1", "--noise", "1", "--tilt", "0.02", "-0.01", "--seed", "5")
    identical = True
    for fmt, sources in (("csv", ["gt_file", "graphcut"]), ("json", ["gt_file"])):
        outs = []
        for k in range(2):
            out = tmp_path / f"{fmt}{k}"
            flags = [x for s in sources for x in ("--mask-source", s)]
            run("eval", str(data), "--out-dir", str(out), "--format", fmt, *flags)
            outs.append(out)
        for name in (f"reports.{fmt}", "table1.csv", "plates.json"):
            identical &= (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    verdict(9, "end-to-end determinism", identical, "repeated eval runs produce byte-identical reports, table and plates (csv and json)")


def random_scene(rng, k):
    foods = []
    theta0 = rng.uniform(0, 2 * np.pi)
    for j in range(int(rng.integers(0, 4))):
        th = theta0 + 2 * np.pi * j / 3
        off = (65 * np.cos(th), 65 * np.sin(th))
        kind = rng.integers(0, 3)
        a = rng.uniform(12, 30)
        if kind == 0:
            foods.append(Cylinder(a, rng.uniform(1, 30), off, name=f"f{j}"))
        elif kind == 1:
            foods.append(SphericalCap(a, rng.uniform(1, 30), off, name=f"f{j}"))
        else:
            foods.append(Smear(a, rng.uniform(0.5, 5), off, inner_radius_mm=rng.uniform(0, a / 2), name=f"f{j}"))
    spec = synth.default_spec(
        "empty", foods=tuple(foods), noise_sigma_mm=float(rng.uniform(0, 2)),
        tilt=tuple(rng.uniform(-0.03, 0.03, 2)), calib_offset_px=tuple(float(v) for v in rng.integers(-3, 4, 2)), seed=k,
    )
    rs = synth.render(spec)
    rec = rs.record
    if k % 2:
        # a sloppier mask: ground truth plus random speckle
        noisy = rec.gt_mask.data | (rng.random(rec.shape) < 0.05)
        rec = dataclasses.replace(rec, gt_mask=BinaryMask(noisy))
    return rec


def test_10_monotonicity(verdict):
    rng = np.random.default_rng(10)
    ok_scenes, removed = 0, 0
    cfg = PipelineConfig(refine=True)
    for k in range(50):
        m = measure_scene(random_scene(rng, k), cfg)
        subset = not np.any(m.refined_mask.data & ~m.mask.data)
        smaller = m.refined_volume.volume_ml <= m.volume.volume_ml
        ok_scenes += subset and smaller
        removed += m.mask.count - m.refined_mask.count
    verdict(10, "refinement monotonicity", ok_scenes == 50, f"{ok_scenes}/50 scenes subset and volume-monotone ({removed} pixels removed overall)")
