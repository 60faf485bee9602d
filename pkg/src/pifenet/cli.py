"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .config import ConfigError, PipelineConfig, preset
from .data import (FormatError, load_calibration, load_kitti_bin, load_kitti_labels, read_box_labels,
                   read_detections, save_kitti_bin, synthetic_scenes, write_detections, format_box)
from .evaluation import LEVELS, evaluate
from .geometry import Box3D
from .model import PiFeNet
from .pillars import crop_to_range, pillarize
from .selftest import run_selftest
from .train import ConfigMismatch, DivergenceError, bench, infer, load_checkpoint, save_checkpoint, train_toy

logger = logging.getLogger("pifenet")


class CheckFailed(Exception):
    pass


def resolve_config(args) -> PipelineConfig:
    cfg = preset(args.preset or "toy")
    if args.config:
        cfg = PipelineConfig.load(args.config, base=cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bin_inputs(paths: Sequence[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.bin")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return files


# --- commands ----------------------------------------------------------------

def cmd_pillarize(args) -> int:
    cfg = resolve_config(args)
    pc = cfg.pillar_config()
    cloud = load_kitti_bin(args.input)
    pillars = pillarize(crop_to_range(cloud, pc), pc, seed=cfg.seed)
    out = _out_dir(args)
    np.savez(out / "pillars.npz", features=pillars.features, ix=pillars.ix, iy=pillars.iy,
             counts=pillars.counts)
    summary = {"schema": "pifenet.pillars/1", "input": str(args.input), "seed": cfg.seed,
               "points_in": len(cloud), "points_kept": int(pillars.counts.sum()),
               "occupied": pillars.occupied, "max_pillars": pc.max_pillars, "max_points": pc.max_points,
               "grid": [pc.grid_y, pc.grid_x], "channels": pc.channels}
    report.write_json(out / "pillars.json", summary)
    occ = np.zeros((pc.grid_y, pc.grid_x))
    occ[pillars.iy[:pillars.occupied], pillars.ix[:pillars.occupied]] = pillars.counts[:pillars.occupied]
    report.plot_occupancy(occ, out / "occupancy.png")
    print(f"{summary['occupied']} pillars from {summary['points_in']} points -> {out}")
    return 0


def cmd_train_toy(args) -> int:
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.scenes is not None:
        cfg = cfg.replace(num_scenes=args.scenes)
    out = _out_dir(args)
    pc = cfg.pillar_config()
    scenes = synthetic_scenes(pc, cfg.num_scenes, cfg.seed, min_peds=cfg.min_pedestrians,
                              max_peds=cfg.max_pedestrians, ground_points=cfg.ground_points, poles=cfg.poles)
    (out / "scenes").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    for i, s in enumerate(scenes):
        save_kitti_bin(out / "scenes" / f"{i:06d}.bin", s.cloud)
        (out / "labels" / f"{i:06d}.txt").write_text(
            "".join(format_box(Box3D.from_array(b)) + "\n" for b in s.boxes))
    (out / "config.txt").write_text(cfg.dumps())

    result = train_toy(cfg, scenes, log_every=args.log_every)
    save_checkpoint(out / "checkpoint.npz", result.model)
    report.write_csv(out / "loss_trace.csv", result.trace)
    if result.trace:
        report.plot_loss_trace(result.trace, out / "loss.png")

    dets = infer(result.model, [s.cloud for s in scenes], seed=cfg.seed)
    ev = evaluate(dets, [s.ground_truth() for s in scenes], cfg.eval_iou)
    summary = {"schema": "pifenet.train/1", "seed": cfg.seed, "epochs": cfg.epochs, "scenes": len(scenes),
               "seconds": result.seconds,
               "first_loss": result.first_loss if result.trace else None,
               "final_loss": result.final_loss if result.trace else None,
               "loss_ratio": result.final_loss / result.first_loss if result.trace else None,
               "train_ap40_bev": ev.ap("bev", "all"), "train_ap40_3d": ev.ap("3d", "all")}
    report.write_json(out / "train.json", summary)
    for k, v in summary.items():
        print(f"{k:>16}: {v}")
    return 0


def cmd_infer(args) -> int:
    runtime = resolve_config(args) if (args.config or args.preset) else None
    model = load_checkpoint(args.checkpoint, runtime)
    cfg = model.cfg if args.seed is None else model.cfg.replace(seed=args.seed)
    files = _bin_inputs(args.inputs)
    clouds = [load_kitti_bin(f) for f in files]
    dets = infer(model, clouds, args.score_floor, seed=cfg.seed)
    out = _out_dir(args)
    rows = []
    for f, cloud, d in zip(files, clouds, dets):
        write_detections(out / f"{f.stem}.txt", d)
        if args.dump_bev_ppm:
            report.dump_bev_ppm(out / f"{f.stem}.ppm", cfg.pillar_config(), [x.box for x in d],
                                points=cloud.points[:, :2])
        rows.append({"frame": f.stem, "points": len(cloud), "detections": len(d)})
    report.write_json(out / "infer.json", {"schema": "pifenet.infer/1", "checkpoint": str(args.checkpoint),
                                           "seed": cfg.seed, "frames": rows})
    print(f"{sum(r['detections'] for r in rows)} detections over {len(rows)} frames -> {out}")
    return 0


def cmd_eval(args) -> int:
    label_dir = Path(args.labels)
    if not label_dir.is_dir():
        raise FileNotFoundError(f"label directory not found: {label_dir}")
    stems = sorted(p.stem for p in label_dir.glob("*.txt"))
    if not stems:
        raise FormatError(f"no label files in {label_dir}")
    gts, dets = [], []
    for stem in stems:
        if args.label_format == "kitti":
            if not args.calib:
                raise FormatError("--calib is required for KITTI labels")
            calib = load_calibration(Path(args.calib) / f"{stem}.txt")
            gts.append(load_kitti_labels(label_dir / f"{stem}.txt", calib))
        else:
            gts.append(read_box_labels(label_dir / f"{stem}.txt"))
        det_file = Path(args.dets) / f"{stem}.txt"
        dets.append(read_detections(det_file) if det_file.exists() else [])
    levels = LEVELS if args.label_format == "kitti" else ("all",)
    iou = args.iou if args.iou is not None else resolve_config(args).eval_iou
    ev = evaluate(dets, gts, iou, levels)
    out = _out_dir(args)
    payload = ev.to_dict()
    payload["frames"] = len(stems)
    report.write_json(out / "eval.json", payload)
    report.write_csv(out / "eval.csv", payload["results"])
    pr_rows = [{"mode": m, "difficulty": lvl, "recall": r, "precision": p}
               for (m, lvl), c in ev.results.items() for r, p in zip(c.recalls, c.precisions)]
    report.write_csv(out / "pr.csv", pr_rows)
    report.plot_pr_curves({f"{m}/{lvl}": c for (m, lvl), c in ev.results.items()}, out / "pr.png")
    for row in payload["results"]:
        ap = "n/a" if row["ap40"] is None else f"{100 * row['ap40']:.2f}"
        print(f"{row['mode']:>3} {row['difficulty']:>8}  AP40@{iou:g} {ap:>6}  "
              f"tp {row['tp']} fp {row['fp']} fn {row['fn']}")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, resolve_config(args) if (args.config or args.preset) else None)
    else:
        model = PiFeNet(resolve_config(args))
    cfg = model.cfg if args.seed is None else model.cfg.replace(seed=args.seed)
    if args.inputs:
        clouds = [load_kitti_bin(f) for f in _bin_inputs(args.inputs)]
    else:
        clouds = [s.cloud for s in synthetic_scenes(cfg.pillar_config(), 4, cfg.seed)]
    if not clouds:
        raise FormatError("no input clouds")
    res = bench(model, clouds, args.warmup, args.iterations)
    out = _out_dir(args)
    report.write_json(out / "bench.json", res)
    report.write_csv(out / "bench.csv", res["stages"])
    report.plot_bench(res, out / "bench.png")
    print(f"{'stage':>16} {'mean ms':>9} {'median':>9} {'p95':>9} {'published':>10}")
    for r in res["stages"]:
        print(f"{r['stage']:>16} {r['mean_ms']:9.2f} {r['median_ms']:9.2f} {r['p95_ms']:9.2f} "
              f"{r['reference_ms']:10.2f}")
    print(f"stage sum {res['stage_sum_ms']:.2f} ms vs end-to-end {res['end_to_end_ms']:.2f} ms "
          f"({100 * res['accounting_error']:.2f}% apart); published figures are GPU reference only")
    if res["accounting_error"] > 0.05:
        raise CheckFailed("stage times do not account for end-to-end time within 5%")
    return 0


def cmd_selftest(args) -> int:
    cfg = resolve_config(args)
    results = run_selftest(cfg)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    if args.out:
        report.write_json(_out_dir(args) / "selftest.json",
                          {"schema": "pifenet.selftest/1",
                           "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]})
    if not all(r.passed for r in results):
        raise CheckFailed(f"{sum(not r.passed for r in results)} self-test check(s) failed")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file layered over the preset")
    common.add_argument("--preset", choices=("kitti-ped", "toy"), help="base configuration (default toy)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pifenet", description="Pillar-based pedestrian detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pillarize", parents=[common], help="pillarize one point-cloud binary")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pillarize)

    p = sub.add_parser("train-toy", parents=[common], help="train on seeded synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--scenes", type=int)
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", parents=[common], help="detect pedestrians in point-cloud binaries")
    p.add_argument("inputs", nargs="+", help=".bin files or directories of them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-floor", type=float)
    p.add_argument("--dump-bev-ppm", action="store_true", help="also write a BEV raster per frame")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="AP40 of detection files against labels")
    p.add_argument("--dets", required=True, help="directory of detection files")
    p.add_argument("--labels", required=True, help="directory of label files")
    p.add_argument("--label-format", choices=("box", "kitti"), default="box")
    p.add_argument("--calib", help="calibration directory (KITTI labels)")
    p.add_argument("--iou", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="per-stage latency breakdown")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", parents=[common], help="built-in correctness checks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckFailed, DivergenceError) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ConfigError, ConfigMismatch, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
