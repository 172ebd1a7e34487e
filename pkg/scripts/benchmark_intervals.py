#!/usr/bin/env python3
"""Throughput / FLOP table across keyframe intervals with the heavy toy segmenter.

    python scripts/benchmark_intervals.py --frames 60 --reps 2
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from vidseg.config import load_config
from vidseg.metrics import bench, count_flops, count_params
from vidseg.pipeline import ToySegmenter, init_models, init_toy_params
from vidseg.synthetic import make_snippets
from vidseg.tensor import Tensor

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "synthetic.json"))
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--warmup", type=int, default=2)
    ap.add_argument("--reps", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--single-thread", action="store_true",
                    help="pin BLAS to one thread for steadier timings")
    args = ap.parse_args()

    cfg = load_config(args.config)
    p = replace(cfg.pipeline, segmenter="toy", dtype="float32")
    models = init_models(p, seed=args.seed)
    toy_params = init_toy_params(np.random.default_rng(args.seed + 1),
                                 p.class_count, width=p.toy_width)
    toy = ToySegmenter(toy_params)
    snippet = make_snippets(cfg.synthetic, 1, seed=5, frame_count=args.frames)[0]
    frames = [Tensor.wrap(f.astype(np.float32)) for f in snippet.frames]

    def run():
        print(f"{'l':>2} {'FPS':>8} {'compute FPS':>12} {'key ms':>8} "
              f"{'stage ms':>9} {'avg GFLOPs':>11}")
        for l in (1, 2, 3, 4, 5):
            cl = replace(p, keyframe_interval=l)
            r = bench(cl, models, toy, frames, warmup=args.warmup, reps=args.reps)
            f = count_flops(models, cl, toy_params)
            stage_ms = sum(r.stage_means_ms.values())
            print(f"{l:>2} {r.fps:8.2f} {r.compute_fps:12.2f} "
                  f"{r.keyframe_mean_ms:8.2f} {stage_ms:9.2f} "
                  f"{f.interval_average / 1e9:11.4f}")
        f = count_flops(models, p, toy_params)
        print(f"\nnon-keyframe {f.nonkeyframe / 1e9:.4f} GFLOPs vs keyframe "
              f"{f.keyframe / 1e9:.4f} GFLOPs (ratio {f.nonkeyframe / f.keyframe:.3f})")
        for stage, val in f.nonkey_stages.items():
            print(f"  {stage:5s} {val / 1e6:9.3f} MFLOPs")
        print("parameters:", ", ".join(f"{k}={v:,}" for k, v in
                                       count_params(models, toy_params).items()))

    if args.single_thread:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            run()
    else:
        run()
    return 0


if __name__ == "__main__":
    sys.exit(main())
