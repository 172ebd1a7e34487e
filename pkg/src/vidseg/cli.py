"""Command-line surface: propagate, train, eval, bench, gradcheck, gen-synthetic.

Exit codes: 0 success, 2 missing input files (the message names the path),
1 any other validation or runtime failure. Every command is deterministic
given identical inputs and --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import storage
from .config import FullConfig, load_config, save_config, with_pipeline
from .errors import MissingFileError, VidsegError
from .gradcheck import gradcheck_all
from .metrics import bench, count_flops, count_params, eval_protocol
from .pipeline import (
    OracleSegmenter,
    ToySegmenter,
    gt_oracle,
    init_models,
    init_toy_params,
    run_sequence,
)
from .synthetic import Snippet, make_snippets, scene_snippet
from .tensor import Tensor
from .train import OptimizerState, train
from .warp import labels_to_probs


def _load_full_config(args) -> FullConfig:
    cfg = load_config(args.config) if args.config else FullConfig()
    if getattr(args, "interval", None):
        cfg = with_pipeline(cfg, keyframe_interval=args.interval)
    return cfg


def _segmenter_for_manifest(cfg: FullConfig, manifest, store):
    p = cfg.pipeline
    if p.segmenter == "toy":
        if store is None or store.toy is None:
            raise VidsegError("config selects the toy segmenter but the model store "
                              "holds no toy parameters")
        return ToySegmenter(store.toy)
    if manifest.oracle_segs:
        return OracleSegmenter(
            lambda i: storage.read_seg(manifest.oracle_path(i), dtype=p.np_dtype))
    if manifest.labels:
        labels = [storage.read_pgm(manifest.label_path(i)) for i in range(len(manifest))]
        return gt_oracle(labels, p.class_count, dtype=p.np_dtype)
    raise VidsegError("oracle segmenter needs oracle_segs or labels in the manifest")


def _frame_source(manifest, dtype):
    for i in range(len(manifest)):
        yield storage.read_ppm(manifest.frame_path(i), dtype=dtype)


def cmd_propagate(args) -> int:
    cfg = _load_full_config(args)
    p = cfg.pipeline
    store = storage.load_models(args.models, dtype=p.np_dtype)
    manifest = storage.load_seq_manifest(args.frames)
    segmenter = _segmenter_for_manifest(cfg, manifest, store)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = []
    count = 0
    for i, (seg, t) in enumerate(run_sequence(_frame_source(manifest, p.np_dtype),
                                              p, store.models, segmenter)):
        storage.write_seg(out_dir / f"seg_{i:06d}.bin", seg)
        times.append(t)
        count += 1
    if args.timing_log:
        storage.write_timing_log(args.timing_log, times)
    print(f"propagated {count} frames -> {out_dir}")
    return 0


def _load_snippets(index_path) -> tuple[list[Snippet], list]:
    manifests = [storage.load_seq_manifest(p) for p in storage.load_dataset_index(index_path)]
    snippets = []
    for m in manifests:
        frames = tuple(storage.read_ppm(m.frame_path(i)).data for i in range(len(m)))
        if not m.labels:
            raise VidsegError(f"dataset snippet under {m.root} has no label files")
        labels = tuple(storage.read_pgm(m.label_path(i)) for i in range(len(m)))
        snippets.append(Snippet(frames=frames, labels=labels))
    return snippets, manifests


def cmd_train(args) -> int:
    cfg = _load_full_config(args)
    if args.intervals:
        from dataclasses import replace
        cfg = FullConfig(pipeline=cfg.pipeline, optimizer=cfg.optimizer,
                         train=replace(cfg.train, intervals=tuple(args.intervals)),
                         synthetic=cfg.synthetic)
    snippets, _ = _load_snippets(args.data)
    models = None
    opt_state = None
    if args.resume:
        store = storage.load_models(args.resume)
        models = store.models
        opt_state = OptimizerState(
            velocities=dict(store.velocities),
            iteration=int((store.training or {}).get("iteration", 0)))
        print(f"resuming at iteration {opt_state.iteration}")
    result = train(snippets, cfg, iterations=args.iters, seed=args.seed,
                   models=models, opt_state=opt_state,
                   progress=(lambda it, lr, loss:
                             print(f"iter {it:5d} lr {lr:.6f} loss {loss:.5f}"))
                   if args.verbose else None)
    storage.save_models(args.out_models, result.models, cfg.pipeline,
                        training={"iteration": result.opt_state.iteration,
                                  "seed": args.seed},
                        velocities=result.opt_state.velocities)
    if args.loss_curve:
        storage.write_loss_curve(args.loss_curve, result.curve)
    print(f"trained {args.iters} iterations -> {args.out_models} "
          f"(iteration {result.opt_state.iteration})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_full_config(args)
    p = cfg.pipeline
    store = storage.load_models(args.models, dtype=p.np_dtype)
    snippets, manifests = _load_snippets(args.data)
    seg_map = {}
    for snippet, manifest in zip(snippets, manifests):
        seg_map[id(snippet)] = _segmenter_for_manifest(cfg, manifest, store)
    result = eval_protocol(p, store.models, snippets,
                           interval=p.keyframe_interval,
                           segmenter_for=lambda s: seg_map[id(s)])
    dist = " ".join(f"{v:.4f}" for v in result.per_distance)
    print(f"per-distance mIoU: {dist}")
    print(f"average mIoU: {result.avg_miou:.4f}")
    print(f"minimum mIoU: {result.min_miou:.4f}")
    print(f"skipped snippets: {result.skipped}")
    if args.report:
        import json
        Path(args.report).write_text(json.dumps({
            "interval": p.keyframe_interval,
            "per_distance_miou": result.per_distance,
            "avg_miou": result.avg_miou,
            "min_miou": result.min_miou,
            "skipped": result.skipped}, indent=2) + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_full_config(args)
    p = cfg.pipeline
    store = storage.load_models(args.models, dtype=p.np_dtype)
    manifest = storage.load_seq_manifest(args.frames)
    frames = [storage.read_ppm(manifest.frame_path(i), dtype=p.np_dtype)
              for i in range(len(manifest))]
    intervals = args.intervals or [p.keyframe_interval]
    reports = []
    for l in intervals:
        cfg_l = with_pipeline(cfg, keyframe_interval=l).pipeline
        segmenter = _segmenter_for_manifest(cfg, manifest, store)
        report = bench(cfg_l, store.models, segmenter, frames,
                       warmup=args.warmup, reps=args.reps)
        flops = count_flops(store.models, cfg_l, store.toy)
        reports.append(report)
        for line in report.lines():
            print(line)
        print(f"  FLOPs keyframe {flops.keyframe:,} nonkey {flops.nonkeyframe:,} "
              f"interval-avg {flops.interval_average:,.0f}")
    params = count_params(store.models, store.toy)
    print("parameters: " + ", ".join(f"{k}={v:,}" for k, v in params.items()))
    if args.report:
        import json
        Path(args.report).write_text(json.dumps(
            [r.to_dict() for r in reports], indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_all(seed=args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_gen_synthetic(args) -> int:
    cfg = _load_full_config(args)
    syn = cfg.synthetic
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    manifest_paths = []
    from .synthetic import make_scene
    for s in range(args.scenes):
        scene_dir = out / f"scene_{s:03d}"
        for sub in ("frames", "labels", "oracle"):
            (scene_dir / sub).mkdir(parents=True, exist_ok=True)
        snippet = scene_snippet(make_scene(rng, syn, args.frames))
        frames, labels, oracle = [], [], []
        for t, (frame, label) in enumerate(zip(snippet.frames, snippet.labels)):
            fp = f"frames/frame_{t:03d}.ppm"
            lp = f"labels/label_{t:03d}.pgm"
            op = f"oracle/seg_{t:03d}.bin"
            storage.write_ppm(scene_dir / fp, Tensor.wrap(frame))
            storage.write_pgm(scene_dir / lp, label)
            from .pipeline import downsample_labels
            storage.write_seg(scene_dir / op,
                              labels_to_probs(downsample_labels(label), syn.class_count))
            frames.append(fp)
            labels.append(lp)
            oracle.append(op)
        manifest = storage.SeqManifest(
            root=scene_dir, class_count=syn.class_count,
            frame_height=syn.height, frame_width=syn.width,
            frames=frames, oracle_segs=oracle, labels=labels)
        storage.save_seq_manifest(scene_dir / "manifest.json", manifest)
        manifest_paths.append(f"scene_{s:03d}/manifest.json")
    storage.save_dataset_index(out / "index.json", manifest_paths)
    save_config(cfg, out / "config.json")
    print(f"wrote {args.scenes} scenes x {args.frames} frames -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidseg",
                                     description="video segmentation propagation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propagate", help="segment a frame sequence")
    p.add_argument("--config")
    p.add_argument("--models", required=True)
    p.add_argument("--frames", required=True, help="sequence manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=int)
    p.add_argument("--timing-log")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("train", help="train the propagation stage")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset index JSON")
    p.add_argument("--out-models", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--intervals", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="model store to continue from")
    p.add_argument("--loss-curve")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy protocol over a dataset")
    p.add_argument("--config")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--interval", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="runtime and FLOP breakdown")
    p.add_argument("--config")
    p.add_argument("--models", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--intervals", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--interval", type=int)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synthetic", help="write a moving-shapes dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("init-models", help="write freshly initialized models")
    p.add_argument("--config")
    p.add_argument("--out-models", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-toy", action="store_true")
    p.set_defaults(func=cmd_init_models)

    return parser


def cmd_init_models(args) -> int:
    cfg = _load_full_config(args)
    p = cfg.pipeline
    models = init_models(p, seed=args.seed)
    toy = None
    if args.with_toy or p.segmenter == "toy":
        toy = init_toy_params(np.random.default_rng(args.seed + 1),
                              p.class_count, width=p.toy_width)
    storage.save_models(args.out_models, models, p, toy=toy,
                        training={"iteration": 0, "seed": args.seed})
    print(f"initialized models -> {args.out_models}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MissingFileError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VidsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
