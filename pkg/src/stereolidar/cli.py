"""Command line entry point: ``stereolidar <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from . import segnet as S
from . import tensor as T
from .box_codec import BoxEncodingScheme
from .config import ConfigError, PipelineConfig, dump_config, load_config, parse_set_args
from .evaluation import evaluate, format_report
from .geometry import Box3D, iou_3d
from .kitti_io import FormatError, load_proposals, load_scene, list_frames, parse_labels, write_detections
from .pipeline import run_inference
from .synthetic import gen_synthetic, write_dataset
from .box_head import head_path, load_box_head, save_box_head
from .training import dataset_samples, load_checkpoint, synthetic_split, train_box_head, train_segnet

log = logging.getLogger("stereolidar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
XI_GRID = (1.5, 1.0, 0.8, 0.5, 0.0, -0.5, -0.8, -1.0, -1.5)
ATTENTION_ROWS = (
    ("Global", dict(use_local=False, use_global=True, use_attention=False)),
    ("Local", dict(use_local=True, use_global=False, use_attention=False)),
    ("Global+Local", dict(use_local=True, use_global=True, use_attention=False)),
    ("Global+Attention", dict(use_local=False, use_global=True, use_attention=True)),
    ("Local+Attention", dict(use_local=True, use_global=False, use_attention=True)),
    ("Global+Local+Attention", dict(use_local=True, use_global=True, use_attention=True)),
)


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    overrides = parse_set_args(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    return load_config(args.config, overrides)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def _read_proposals(cfg: PipelineConfig) -> dict:
    path = cfg.proposals_path
    if not path.exists():
        raise DataError(f"proposal file {path} not found")
    return load_proposals(path.read_text(), str(path))


def _load_samples(cfg: PipelineConfig, frames=None):
    root = Path(cfg.data_root)
    if not (root / "velodyne").is_dir():
        raise DataError(f"{root} has no velodyne/ directory")
    props = _read_proposals(cfg)
    frames = list_frames(root) if frames is None else frames
    return [load_scene(root, f, props.get(f, [])) for f in frames]


def _load_params(cfg: PipelineConfig):
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        params, _ = load_checkpoint(path, cfg.segnet)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise DataError(str(exc)) from exc
    return params


def _read_label_dir(path: Path) -> dict:
    return {p.stem: parse_labels(p.read_text(), str(p)) for p in sorted(Path(path).glob("*.txt"))}


def _write_outputs(dets: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame, records in dets.items():
        (out_dir / f"{frame}.txt").write_text(write_detections(records))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, cfg: PipelineConfig) -> int:
    sc = cfg.synth
    scenes = gen_synthetic(cfg.seed, sc.n_scenes, sc.points_per_scene, sc.clutter_ratio, sc.jitter_px,
                           sc.depth_margin, sc.padding, clearance=sc.clearance)
    root = write_dataset(scenes, Path(args.out or cfg.data_root))
    print(f"wrote {len(scenes)} scenes to {root}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    if args.data:
        cfg.data_root = args.data
        samples = dataset_samples(_load_samples(cfg))
        held = []
    else:
        samples, held = synthetic_split(cfg)
    params, start = None, 0
    ckpt = Path(cfg.checkpoint)
    if args.resume:
        params, start = load_checkpoint(ckpt, cfg.segnet)
    log_path = Path(args.loss_log) if args.loss_log else ckpt.with_suffix(".loss.csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume and log_path.exists() else "w"
    with log_path.open(mode) as fh:
        if mode == "w":
            fh.write("step,loss,grad_norm\n")

        def on_step(step, r):
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                fh.write(f"{step},{r.loss!r},{r.grad_norm!r}\n")

        result = train_segnet(samples, cfg.segnet, cfg.train.steps, cfg.train.lr, params, start, ckpt,
                              cfg.train.checkpoint_every, on_step)
    train_acc = S.accuracy(samples, result.params, cfg.segnet)
    print(f"steps: {result.step}")
    print(f"final_loss: {result.losses[-1]!r}" if result.losses else "final_loss: absent")
    print(f"train_accuracy: {train_acc:.6f}")
    if held:
        print(f"heldout_accuracy: {S.accuracy(held, result.params, cfg.segnet):.6f}")
    print(f"checkpoint: {ckpt}")
    if cfg.box_head == "learned":
        save_box_head(train_box_head(result.params, cfg), head_path(ckpt))
        print(f"box_head: {head_path(ckpt)}")
    return EXIT_OK


def cmd_infer(args, cfg: PipelineConfig) -> int:
    samples = _load_samples(cfg)
    params = _load_params(cfg)
    head = _box_head(cfg)
    debug = Path(args.debug_dump) if args.debug_dump else None
    dets = run_inference(samples, params, cfg, cfg.workers, head, debug)
    _write_outputs(dets, Path(args.out or cfg.out_dir))
    n = sum(len(v) for v in dets.values())
    print(f"frames: {len(dets)} detections: {n}")
    return EXIT_OK


def _box_head(cfg: PipelineConfig):
    if cfg.box_head == "geometric":
        return None
    path = head_path(cfg.checkpoint)
    if not path.exists():
        raise DataError(f"box head {path} not found; train with box_head = learned first")
    try:
        return load_box_head(cfg)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise DataError(str(exc)) from exc


def cmd_eval(args, cfg: PipelineConfig) -> int:
    gt_dir = Path(args.gt or Path(cfg.data_root) / "label_2")
    det_dir = Path(args.det or cfg.out_dir)
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} not found")
    gt = _read_label_dir(gt_dir)
    det = _read_label_dir(det_dir) if det_dir.is_dir() else {}
    missing = sorted(set(gt) - set(det))
    extra = sorted(set(det) - set(gt))
    if missing and det:
        log.warning("%d frame(s) lack detections, evaluating the intersection: %s", len(missing),
                    " ".join(missing[:20]))
        gt = {f: gt[f] for f in gt if f in det}
    if extra:
        log.warning("%d detection frame(s) have no ground truth: %s", len(extra), " ".join(extra[:20]))
    e = cfg.eval
    rows = evaluate(gt, det, classes=tuple(args.classes.split(",")), criteria=(e.criterion,) if args.single
                    else ("iou3d", "bev"), interpolation=e.interpolation, thresholds=e.iou_thresholds)
    _emit(format_report(rows), args.out)
    return EXIT_OK


def _jittered_config(cfg: PipelineConfig) -> PipelineConfig:
    """The jittered, padded proposal variant: padding defaults to the rough-box margin."""
    sc = cfg.synth
    synth = dataclasses.replace(sc, jitter_px=sc.jitter_px if sc.jitter_px > 0 else ABLATE_JITTER_PX,
                                padding=sc.padding if sc.padding > 0 else cfg.proposal_margin)
    return dataclasses.replace(cfg, synth=synth)


def _ablation_scenes(cfg: PipelineConfig, jittered: bool):
    sc = _jittered_config(cfg).synth if jittered else cfg.synth
    return gen_synthetic(cfg.seed, sc.n_scenes, sc.points_per_scene, sc.clutter_ratio, sc.jitter_px,
                         sc.depth_margin, sc.padding, start=ABLATE_START, clearance=sc.clearance)


ABLATE_START = 50_000  # frame indices disjoint from the training pool
ABLATE_JITTER_PX = 5.0


def _scene_metrics(scenes, params, cfg: PipelineConfig, head=None) -> tuple[float, float, float]:
    """Mean IoU3D of each scene's first detection, share with IoU3D >= 0.9, and AP3D."""
    samples = [s.to_sample() for s in scenes]
    dets = run_inference(samples, params, cfg, cfg.workers, head)
    ious = []
    for s in scenes:
        d = dets[s.frame]
        ious.append(iou_3d(d[0].to_box(), s.boxes[0]) if d else 0.0)
    gt = {s.frame: s.records for s in scenes}
    rows = evaluate(gt, dets, criteria=(cfg.eval.criterion,), difficulties=(cfg.eval.difficulty,),
                    interpolation=cfg.eval.interpolation, thresholds=cfg.eval.iou_thresholds)
    ap = rows[0].ap if rows[0].ap is not None else math.nan
    ious = np.asarray(ious)
    return float(ious.mean()), float((ious >= 0.9).mean()), ap


def _trained_params(cfg: PipelineConfig, segcfg: S.SegNetConfig):
    samples, held = synthetic_split(cfg)
    res = train_segnet(samples, segcfg, cfg.train.steps, cfg.train.lr)
    return res.params, S.accuracy(held, res.params, segcfg) if held else math.nan


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    axis = args.axis
    lines = []
    if axis == "attention":
        lines.append("setting,heldout_accuracy,mean_iou3d,frac_iou3d_ge_0.9")
        scenes = _ablation_scenes(cfg, jittered=False)
        for name, flags in ATTENTION_ROWS:
            segcfg = S.SegNetConfig(**{**_segnet_kwargs(cfg.segnet), **flags})
            params, held = _trained_params(cfg, segcfg)
            cell = PipelineConfig(**{**_top_kwargs(cfg), "segnet": segcfg})
            mean_iou, frac, _ = _scene_metrics(scenes, params, cell)
            lines.append(f"{name},{held:.6f},{mean_iou:.6f},{frac:.6f}")
    else:
        params = _load_params(cfg) if Path(cfg.checkpoint).exists() else _trained_params(cfg, cfg.segnet)[0]
        if axis == "xi_sweep":
            scenes = _ablation_scenes(cfg, jittered=True)
            lines.append("xi,mean_iou3d,frac_iou3d_ge_0.9,ap")
            for xi in XI_GRID:
                cell = PipelineConfig(**{**_top_kwargs(cfg), "xi": xi})
                mean_iou, frac, ap = _scene_metrics(scenes, params, cell)
                lines.append(f"{xi:+.1f},{mean_iou:.6f},{frac:.6f},{ap:.6f}")
        elif axis == "encoding":
            # each scheme gets its own learned head; the geometric fit would make the rows identical
            scenes = _ablation_scenes(cfg, jittered=True)
            jitter_cfg = _jittered_config(cfg)
            lines.append("encoding,mean_iou3d,frac_iou3d_ge_0.9,ap")
            for scheme in BoxEncodingScheme:
                cell = PipelineConfig(**{**_top_kwargs(jitter_cfg), "encoding": scheme, "box_head": "learned"})
                head = train_box_head(params, cell, scheme)
                mean_iou, frac, ap = _scene_metrics(scenes, params, cell, head)
                lines.append(f"{scheme.label},{mean_iou:.6f},{frac:.6f},{ap:.6f}")
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _segnet_kwargs(c: S.SegNetConfig) -> dict:
    return {f.name: getattr(c, f.name) for f in dataclasses.fields(c)}


def _top_kwargs(cfg: PipelineConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    report = gradcheck.run_suite(seeds=range(args.seeds))
    _emit(report.format(), args.out)
    print(f"max_rel_error: {report.max_rel_error:.3e} seconds: {report.seconds:.1f} status: "
          f"{'ok' if report.ok else 'FAIL'}")
    return EXIT_OK if report.ok else EXIT_NUMERIC


def _random_box(rng) -> Box3D:
    return Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 4.0, 3), rng.uniform(-math.pi, math.pi))


def cmd_bench_iou(args, cfg: PipelineConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    pairs = [(_random_box(rng), _random_box(rng)) for _ in range(args.pairs)]
    start = time.perf_counter()
    total = 0.0
    for a, b in pairs:
        total += iou_3d(a, b)
    secs = time.perf_counter() - start
    print(f"pairs: {args.pairs}")
    print(f"seconds: {secs:.4f}")
    print(f"pairs_per_second: {args.pairs / max(secs, 1e-12):.1f}")
    print(f"mean_iou3d: {total / max(args.pairs, 1):.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--debug-dump", metavar="DIR", help="write per-frame intermediate artifacts as JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="configuration override (repeatable)")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration first")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stereolidar", description="Stereo proposal + LIDAR 3D detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write a synthetic KITTI-layout dataset")
    g.add_argument("--out", help="output root (default: data_root)")
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", parents=[common], help="train the segmentation network")
    t.add_argument("--data", help="train on a KITTI-layout directory instead of generated scenes")
    t.add_argument("--resume", action="store_true", help="continue from the configured checkpoint")
    t.add_argument("--loss-log", help="per-step loss CSV (default: <checkpoint>.loss.csv)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="run detection and write KITTI result files")
    i.add_argument("--out", help="output directory (default: out_dir)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="average precision of detections against labels")
    e.add_argument("--gt", help="ground-truth label directory (default: <data_root>/label_2)")
    e.add_argument("--det", help="detection directory (default: out_dir)")
    e.add_argument("--classes", default="Car")
    e.add_argument("--single", action="store_true", help="only the configured eval.criterion")
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="comparison tables on synthetic data")
    a.add_argument("axis", choices=("xi_sweep", "encoding", "attention"))
    a.add_argument("--out", help="also write the table here")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the network")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--out", help="also write the CSV here")
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench-iou", parents=[common], help="rotated 3D IoU throughput")
    b.add_argument("--pairs", type=int, default=10000)
    b.set_defaults(func=cmd_bench_iou)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
