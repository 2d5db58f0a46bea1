"""Command-line entry point: ``knotsaw <subcommand> [options]``.

Global flags come before the subcommand::

    knotsaw --seed 7 --set bump_height=2,4 generate --out run/
    knotsaw pipeline --out run/ --logs 10 --jobs 4
"""

import argparse
import contextlib
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import detection, heightmap, plotting, registration, sawopt, sawsim, synthgen
from .cloud import read_cloud, write_cloud
from .config import Config, load_config
from .errors import InvalidParams, KnotsawError

DEFAULT_SIGMA_DEG = 5.0


class StageError(Exception):
    def __init__(self, stage, kind, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.kind = kind


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except KnotsawError as exc:
        raise StageError(name, exc.kind, str(exc)) from exc
    except OSError as exc:
        raise StageError(name, "io_error", f"{exc.strerror or exc}: {exc.filename or ''}".strip()) from exc
    except ValueError as exc:
        raise StageError(name, "invalid_input", str(exc)) from exc


def _settings(cfg):
    """Typed view of the flat config with documented defaults."""
    return {
        "theta_bins": cfg.get_int("theta_bins", 360),
        "l_bins": cfg.get_int("l_bins", 0) or None,
        "lam": cfg.get_float("lam", heightmap.DEFAULT_LAMBDA),
        "n_segments": cfg.get_int("n_segments", 1),
        "sigma_mm": cfg.get_float("sigma_mm", detection.DEFAULT_SIGMA_MM),
        "log_threshold": cfg.get_float("log_threshold", 0.0),
        "binarize_at": cfg.get_float("binarize_at", detection.DEFAULT_BINARIZE_AT),
        "min_area_cells": cfg.get_int("min_area_cells", detection.DEFAULT_MIN_AREA),
        "iou": cfg.get_float("iou", detection.DEFAULT_IOU),
        "sigma_deg": cfg.get_float("sigma_deg", 0.0),
        "step_deg": cfg.get_float("step_deg", 1.0),
        "sweep_step_deg": cfg.get_float("sweep_step_deg", 1.0),
        "cell_mm": cfg.get_float("cell_mm", sawsim.DEFAULT_CELL_MM),
        "arris_band_mm": cfg.get_float("arris_band_mm", sawsim.DEFAULT_ARRIS_BAND_MM),
        "pattern": cfg.get_str("pattern", "square"),
        "pattern_side": cfg.get_float("pattern_side", 150.0),
    }


def _validate(s):
    if s["theta_bins"] < 2:
        raise InvalidParams("theta_bins", "must be >= 2")
    if s["lam"] < 0:
        raise InvalidParams("lam", "must be >= 0")
    if s["n_segments"] < 1:
        raise InvalidParams("n_segments", "must be >= 1")
    if not 0 <= s["binarize_at"] <= 1:
        raise InvalidParams("binarize_at", "must lie in [0, 1]")
    if not 0 <= s["iou"] <= 1:
        raise InvalidParams("iou", "must lie in [0, 1]")
    for key in ("sigma_mm", "step_deg", "sweep_step_deg", "cell_mm", "arris_band_mm", "pattern_side"):
        if not s[key] > 0:
            raise InvalidParams(key, "must be positive")
    return s


def _gen_params(cfg, seed):
    params = synthgen.GenParams.from_mapping(cfg)
    if seed is not None:
        params.seed = seed
    return params.validate()


def _pattern(s):
    if s["pattern"] in (None, "", "square"):
        return sawopt.square_two_board(s["pattern_side"])
    return sawopt.read_pattern(s["pattern"])


def _sigma_deg(s, log=None):
    if s["sigma_deg"] > 0:
        return s["sigma_deg"]
    if log is not None and log.knots:
        return log.mean_angular_halfwidth()
    return DEFAULT_SIGMA_DEG


def _write_function(out, name, theta, values, title, ylabel, marker=None):
    sawopt.write_function_csv(out / f"{name}.csv", theta, values)
    plotting.plot_function(out / f"{name}.svg", theta, values, title, ylabel, marker)


# --- subcommands -----------------------------------------------------------

def cmd_generate(args, cfg):
    with stage("generate"):
        params = _gen_params(cfg, args.seed)
        log = synthgen.generate_log(params)
        cloud = synthgen.render_point_cloud(log, params)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_cloud(cloud, out / args.cloud_name)
        (out / "log.json").write_text(log.to_json())
    print(f"knots {len(log.knots)}")
    print(f"points {len(cloud)}")
    return 0


def cmd_heightmap(args, cfg):
    s = _validate(_settings(cfg))
    with stage("heightmap"):
        cloud = read_cloud(args.cloud)
        hmap, centerline = heightmap.heightmap_from_cloud(cloud, s["n_segments"], s["theta_bins"],
                                                          s["l_bins"], s["lam"])
        heightmap.write_heightmap(hmap, args.out)
        if args.plot:
            plotting.plot_heightmap(args.plot, hmap.values, hmap.l_extent)
    print(f"grid {hmap.l_bins}x{hmap.theta_bins} l_extent {hmap.l_extent:.3f} mm "
          f"solver {hmap.info['solver']} residual {hmap.info['relative_residual']:.2e}")
    return 0


def cmd_register(args, cfg):
    cutoff = args.cutoff if args.cutoff is not None else cfg.get_float("cutoff_mm", registration.DEFAULT_CUTOFF_MM)
    with stage("register"):
        source = read_cloud(args.source)
        target = read_cloud(args.target)
        tf, res = registration.register(source, target, cfg.get_int("icp_max_iter", 100),
                                        cfg.get_float("icp_eps", 1e-12), args.reject_worst)
        Path(args.out_transform).write_text(tf.to_text() + "\n")
        msg = f"icp iterations {res.iterations} converged {res.converged} mse {res.mse_history[-1]:.3e}"
        if args.out_cloud:
            if source.labels is None:
                raise InvalidParams("source", "label transfer needs a labeled source cloud")
            lt = registration.transfer_labels(source, target, tf, cutoff)
            target.labels = lt.labels
            write_cloud(target, args.out_cloud)
            msg += f" matched {lt.matched_fraction:.4f}"
    print(msg)
    return 0


def cmd_detect(args, cfg):
    s = _validate(_settings(cfg))
    with stage("detect"):
        hmap = heightmap.read_heightmap(args.hmap)
        pmap = detection.log_detect(hmap, s["sigma_mm"], s["log_threshold"])
        detection.write_pmap(pmap, args.out_pmap)
        dets = detection.extract_detections(pmap, s["min_area_cells"], s["binarize_at"])
        if args.out_csv:
            detection.write_detections(dets, args.out_csv)
    print(f"detections {len(dets)}")
    return 0


def cmd_knotfn(args, cfg):
    with stage("knotfn"):
        pmap = detection.read_pmap(args.pmap)
        kf = sawopt.knot_function(pmap)
        out = Path(args.out)
        sawopt.write_function_csv(out, kf.theta, kf.samples)
        if args.plot:
            plotting.plot_function(args.plot, kf.theta, kf.samples, "knot function", "knot density")
    print(f"mass {kf.samples.sum() * kf.delta_theta:.6f}")
    return 0


def cmd_optimize(args, cfg):
    s = _validate(_settings(cfg))
    with stage("optimize"):
        if args.pmap:
            kf = sawopt.knot_function(detection.read_pmap(args.pmap))
        else:
            kf = sawopt.read_knot_function(args.knotfn)
        pattern = _pattern(s)
        log = synthgen.VirtualLog.from_json(Path(args.log).read_text()) if args.log else None
        pf = sawopt.pattern_function(sawopt.corner_angles(pattern), _sigma_deg(s, log), kf.delta_theta)
        res = sawopt.optimize_angle(kf, pf, s["step_deg"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_function(out, "pattern_function", pf.theta, pf.samples, "pattern function", "density")
        _write_function(out, "objective", res.full_angles, res.full_curve, "cross-correlation",
                        "objective", res.angle_deg)
        (out / "angle.json").write_text(json.dumps(
            {"angle_deg": res.angle_deg, "objective": res.objective,
             "symmetry_period": res.symmetry_period, "sigma_deg": pf.sigma_deg}, indent=1))
    print(f"angle {res.angle_deg:g}")
    return 0


def cmd_saw(args, cfg):
    s = _validate(_settings(cfg))
    with stage("saw"):
        log = synthgen.VirtualLog.from_json(Path(args.log).read_text())
        pattern = _pattern(s)
        grid = sawsim.virtual_saw(log, pattern, args.angle, s["cell_mm"])
        report = sawsim.make_report(args.angle, sawsim.classify_appearances(grid, s["arris_band_mm"]))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        improvement = None
        if args.baseline:
            base = sawsim.all_angle_baseline(log, pattern, s["sweep_step_deg"], s["cell_mm"], s["arris_band_mm"])
            improvement = sawsim.improvement_report(report, base)
        sawsim.write_report_json(report, improvement, out / "report.json")
        _write_appearances_csv(report, out / "appearances.csv")
        if args.pgm:
            for f in grid.faces:
                if f.hits:
                    sawsim.write_pgm(f, out / f"board{f.board_id}_face{f.geometry.face_id}.pgm")
    print(f"arris {sawsim.format_ratio(report.arris_count, report.total_count)} "
          f"area {report.arris_area_dm2:.4f} dm2")
    if improvement:
        print(f"count vs avg {improvement['count_change_text']} area vs avg {improvement['area_change_text']}")
    return 0


def _write_appearances_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knot_id", "board_id", "class", "area_mm2", "l_mm"])
        for a in report.appearances:
            w.writerow([a.knot_id, a.board_id, a.classification, f"{a.area_mm2:.3f}", f"{a.l_pos:.3f}"])


def cmd_evaluate(args, cfg):
    iou = args.iou if args.iou is not None else cfg.get_float("iou", detection.DEFAULT_IOU)
    with stage("evaluate"):
        preds = detection.read_detections(args.pred)
        gts = detection.read_detections(args.gt)
        logs = sorted({d.log for d in gts} | {d.log for d in preds})
        per_log = {name: ([d for d in preds if d.log == name], [d for d in gts if d.log == name])
                   for name in logs} or {"": ([], [])}
        rep = detection.evaluate_many(per_log, iou)
    mean_ap = float(np.mean(list(rep.per_log.values())))
    rows = [(name or "1", ap) for name, ap in rep.per_log.items()]
    width = max([6] + [len(r[0]) for r in rows])
    print(f"{'Log':<{width}}  mAP")
    for name, ap in rows:
        print(f"{name:<{width}}  {ap:.2f}")
    print(f"{'All':<{width}}  {mean_ap:.2f}")
    print(f"{'Pooled':<{width}}  {rep.ap:.2f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log", "map"])
            for name, ap in rows:
                w.writerow([name, repr(float(ap))])
            w.writerow(["All", repr(float(mean_ap))])
            w.writerow(["Pooled", repr(float(rep.ap))])
    return 0


# --- pipeline --------------------------------------------------------------

def run_pipeline(out, cfg, seed, log_path=None, cloud_path=None, pmap_path=None, gt_pmap=False):
    """Full chain for one log; returns the summary row written to ``report.json``."""
    s = _validate(_settings(cfg))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with stage("generate"):
        params = _gen_params(cfg, seed)
        if log_path:
            log = synthgen.VirtualLog.from_json(Path(log_path).read_text())
        else:
            log = synthgen.generate_log(params)
            (out / "log.json").write_text(log.to_json())
    theta_bins = s["theta_bins"]
    l_bins = s["l_bins"] or max(2, math.ceil(log.length / heightmap.DEFAULT_L_SPACING_MM))
    l_extent = log.length
    detection_eval = None
    if pmap_path:
        with stage("detect"):
            pmap = detection.read_pmap(pmap_path)
    elif gt_pmap:
        with stage("detect"):
            pmap = synthgen.ground_truth_pmap(log, theta_bins, l_bins + 1, l_extent)
            detection.write_pmap(pmap, out / "detect.pmap")
    else:
        with stage("heightmap"):
            if cloud_path:
                cloud = read_cloud(cloud_path)
            else:
                cloud = synthgen.render_point_cloud(log, params)
                write_cloud(cloud, out / "cloud.xyz")
            hmap, _ = heightmap.heightmap_from_cloud(cloud, s["n_segments"], theta_bins, s["l_bins"], s["lam"])
            heightmap.write_heightmap(hmap, out / "heightmap.hmap")
            plotting.plot_heightmap(out / "heightmap.png", hmap.values, hmap.l_extent)
        with stage("detect"):
            pmap = detection.log_detect(hmap, s["sigma_mm"], s["log_threshold"])
            detection.write_pmap(pmap, out / "detect.pmap")
            dets = detection.extract_detections(pmap, s["min_area_cells"], s["binarize_at"])
            detection.write_detections(dets, out / "detections.csv")
            gt = synthgen.ground_truth_mask(log, hmap.theta_bins, hmap.l_bins, hmap.l_extent)
            detection.write_detections(gt, out / "ground_truth.csv")
            detection_eval = detection.evaluate_map(dets, gt, s["iou"]).ap
    with stage("knotfn"):
        kf = sawopt.knot_function(pmap)
        _write_function(out, "knot_function", kf.theta, kf.samples, "knot function", "knot density")
    with stage("optimize"):
        pattern = _pattern(s)
        (out / "pattern.json").write_text(pattern.to_json())
        pf = sawopt.pattern_function(sawopt.corner_angles(pattern), _sigma_deg(s, log), kf.delta_theta)
        res = sawopt.optimize_angle(kf, pf, s["step_deg"])
        _write_function(out, "pattern_function", pf.theta, pf.samples, "pattern function", "density")
        _write_function(out, "objective", res.full_angles, res.full_curve, "cross-correlation",
                        "objective", res.angle_deg)
        plotting.plot_functions_overlay(out / "functions.svg", kf.theta, kf.samples, pf.samples, res.angle_deg)
    with stage("saw"):
        report = sawsim.saw_report(log, pattern, res.angle_deg, s["cell_mm"], s["arris_band_mm"])
        base = sawsim.all_angle_baseline(log, pattern, s["sweep_step_deg"], s["cell_mm"], s["arris_band_mm"])
        improvement = sawsim.improvement_report(report, base)
        improvement["detection_map"] = detection_eval
        improvement["sigma_deg"] = pf.sigma_deg
        sawsim.write_report_json(report, improvement, out / "report.json")
        _write_appearances_csv(report, out / "appearances.csv")
        with open(out / "sweep.csv", "w") as fh:
            fh.write("angle_deg,arris_count,arris_area_dm2,total_count\n")
            for a, c, ar, t in zip(base.angles, base.arris_counts, base.arris_areas_dm2, base.total_counts):
                fh.write(f"{a:.6f},{c},{float(ar)!r},{t}\n")
        plotting.plot_sweep(out / "sweep.svg", base.angles, base.arris_counts, res.angle_deg)
    return {"seed": log.seed, "knots": len(log.knots), **improvement}


def _pipeline_job(job):
    out, cfg, seed, gt_pmap = job
    return run_pipeline(out, Config(cfg), seed, gt_pmap=gt_pmap)


SUMMARY_FIELDS = ["log", "seed", "knots", "angle_deg", "arris_count", "total_count", "baseline_mean_count",
                  "count_change", "arris_area_dm2", "baseline_mean_area_dm2", "area_change", "detection_map"]


def summarize(rows):
    """Pooled Table-2 style figures over a batch of summary rows."""
    opt = sum(r["arris_count"] for r in rows)
    mean = sum(r["baseline_mean_count"] for r in rows)
    area = sum(r["arris_area_dm2"] for r in rows)
    mean_area = sum(r["baseline_mean_area_dm2"] for r in rows)
    total = sum(r["total_count"] for r in rows)
    return {
        "count_change": (opt - mean) / mean if mean else 0.0,
        "area_change": (area - mean_area) / mean_area if mean_area else 0.0,
        "arris_count": opt,
        "total_count": total,
        "arris_area_dm2": area,
        "baseline_mean_count": mean,
        "baseline_mean_area_dm2": mean_area,
        "fraction_at_or_below_mean": float(np.mean([r["arris_count"] <= r["baseline_mean_count"] for r in rows]))
        if rows else 0.0,
    }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def cmd_pipeline(args, cfg):
    out = Path(args.out)
    if args.logs is None:
        row = run_pipeline(out, cfg, args.seed, args.log, args.cloud, args.pmap, args.gt_pmap)
        print(f"angle {row['angle_deg']:g}")
        print(f"arris {row['arris_ratio_text']} area {row['arris_area_dm2']:.4f} dm2")
        print(f"count vs avg {row['count_change_text']} area vs avg {row['area_change_text']}")
        return 0
    base_seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    jobs = [(out / f"log_{i:03d}", dict(cfg), base_seed + i, args.gt_pmap) for i in range(args.logs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_pipeline_job, jobs))
    else:
        rows = [_pipeline_job(j) for j in jobs]
    summary = summarize(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for i, r in enumerate(rows):
            w.writerow([f"log_{i:03d}"] + [_fmt(r.get(k)) for k in SUMMARY_FIELDS[1:]])
        w.writerow(["All", "", sum(r["knots"] for r in rows), "", summary["arris_count"], summary["total_count"],
                    _fmt(summary["baseline_mean_count"]), _fmt(summary["count_change"]),
                    _fmt(summary["arris_area_dm2"]), _fmt(summary["baseline_mean_area_dm2"]),
                    _fmt(summary["area_change"]), ""])
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"{'log':<8}{'count vs avg':>14}{'arris/total':>22}{'area vs avg':>14}")
    for i, r in enumerate(rows):
        print(f"{f'log_{i:03d}':<8}{r['count_change_text']:>14}{r['arris_ratio_text']:>22}{r['area_change_text']:>14}")
    ratio = sawsim.format_ratio(summary["arris_count"], summary["total_count"])
    print(f"{'All':<8}{100 * summary['count_change']:>+13.1f}%{ratio:>22}{100 * summary['area_change']:>+13.1f}%")
    return 0


# --- argument parsing ------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="knotsaw", description="Knot-aware sawing angle optimization.")
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for batch runs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthetic log point cloud and ground truth")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--cloud-name", default="cloud.xyz", help="cloud file name (.xyz or .ply)")
    g.set_defaults(func=cmd_generate)

    h = sub.add_parser("heightmap", help="point cloud to HMAP height map")
    h.add_argument("--cloud", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--plot", help="optional image of the height map")
    h.set_defaults(func=cmd_heightmap)

    r = sub.add_parser("register", help="ICP alignment and label transfer")
    r.add_argument("--source", required=True, help="labeled source cloud")
    r.add_argument("--target", required=True)
    r.add_argument("--out-transform", required=True)
    r.add_argument("--out-cloud", help="target cloud with transferred labels")
    r.add_argument("--cutoff", type=float, help="label transfer distance cutoff in mm")
    r.add_argument("--reject-worst", action="store_true", help="drop the worst 5%% of ICP pairs")
    r.set_defaults(func=cmd_register)

    d = sub.add_parser("detect", help="LoG knot detection on a height map")
    d.add_argument("--hmap", required=True)
    d.add_argument("--out-pmap", required=True)
    d.add_argument("--out-csv")
    d.set_defaults(func=cmd_detect)

    k = sub.add_parser("knotfn", help="knot function from a probability map")
    k.add_argument("--pmap", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--plot")
    k.set_defaults(func=cmd_knotfn)

    o = sub.add_parser("optimize", help="sawing angle from a knot function")
    src = o.add_mutually_exclusive_group(required=True)
    src.add_argument("--knotfn")
    src.add_argument("--pmap")
    o.add_argument("--log", help="log JSON supplying the knot angular scale")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("saw", help="virtual sawing report at a given angle")
    s.add_argument("--log", required=True)
    s.add_argument("--angle", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", action="store_true", help="compare against the all-angle mean")
    s.add_argument("--pgm", action="store_true", help="dump face occupancy rasters")
    s.set_defaults(func=cmd_saw)

    e = sub.add_parser("evaluate", help="mAP of detections against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--iou", type=float)
    e.add_argument("--out", help="CSV with the per-log table")
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("pipeline", help="height map, detection, optimization and sawing")
    pl.add_argument("--out", required=True)
    pl.add_argument("--log", help="existing log JSON (default: generate)")
    pl.add_argument("--cloud", help="existing point cloud for the log")
    pl.add_argument("--pmap", help="external probability map; skips detection")
    pl.add_argument("--gt-pmap", action="store_true", help="use ground-truth knot footprints as the map")
    pl.add_argument("--logs", type=int, help="batch of N generated logs with consecutive seeds")
    pl.set_defaults(func=cmd_pipeline)
    return p


def _fail(stage_name, kind, message):
    print(json.dumps({"stage": stage_name, "kind": kind, "message": message}), file=sys.stderr)
    return 2


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = str(args.seed)
        return args.func(args, cfg)
    except StageError as exc:
        return _fail(exc.stage, exc.kind, str(exc))
    except KnotsawError as exc:
        return _fail("config", exc.kind, f"config: {exc}")
    except OSError as exc:
        return _fail("config", "io_error", f"config: {exc}")


if __name__ == "__main__":
    sys.exit(main())
