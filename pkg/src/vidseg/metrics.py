"""Accuracy protocol, analytic FLOP accounting, and the runtime breakdown.

mIoU is computed from a pooled confusion matrix (rows = ground truth,
columns = prediction, ignore label 255 excluded). The evaluation protocol
scores, for every distance i in [0, l), a fresh pipeline started with the
frame i steps before the annotated anchor as keyframe and propagated to the
anchor; scoring happens at full resolution. The average mIoU is the mean
over distances, the minimum mIoU the value at the farthest distance.

FLOP accounting is analytic, with documented conventions: a convolution
costs 2 * out_elements * in_channels * k^2 (+ out_elements when biased);
bilinear warping and non-identity resampling cost 11 per output element
(8 multiplies + 3 adds for the corner blend); the per-pixel fusion costs
2 * (D + 1) per class-pixel. Pure index shifts, activations, softmaxes and
renormalizations are excluded.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import ShapeError, StateError, UndefinedResultError, VidsegError
from .kernels import conv_out_size
from .pipeline import (
    KeyframeSegmenter,
    Models,
    StageTimes,
    ToySegParams,
    gt_oracle,
    run_sequence,
    upsample_to_full,
)
from .synthetic import Snippet
from .tensor import ConvSpec, Tensor

IGNORE_LABEL = 255

RESAMPLE_FLOPS_PER_ELEM = 11
FUSE_FLOPS_PER_CANDIDATE = 2
STAGES = ("flow", "warp", "feat", "fuse")


# ---------------------------------------------------------------------------
# accuracy


@dataclass
class ConfusionMatrix:
    """Counts[c_true, c_pred]; ignore-label pixels are never counted."""

    counts: np.ndarray

    @classmethod
    def empty(cls, class_count: int) -> "ConfusionMatrix":
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, truth: np.ndarray, pred: np.ndarray,
            ignore_label: int = IGNORE_LABEL) -> None:
        if truth.shape != pred.shape:
            raise ShapeError(f"truth {truth.shape} and prediction {pred.shape} differ")
        c = self.class_count
        keep = truth != ignore_label
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
            raise ShapeError(f"labels outside [0, {c}) in confusion update")
        binned = np.bincount(t * c + p, minlength=c * c)
        self.counts += binned.reshape(c, c)

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix) -> float:
    """Mean over classes of TP/(TP+FP+FN); zero-union classes are excluded."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    present = union > 0
    if not present.any():
        raise UndefinedResultError("mIoU undefined: no class has any pixels")
    return float((tp[present] / union[present]).mean())


@dataclass
class EvalResult:
    avg_miou: float
    min_miou: float
    per_distance: list[float]
    skipped: int = 0


def eval_protocol(config: PipelineConfig, models: Models, snippets: Sequence[Snippet],
                  interval: int | None = None,
                  segmenter_for: Callable[[Snippet], KeyframeSegmenter] | None = None,
                  ) -> EvalResult:
    """Average / minimum mIoU over keyframe distances 0..l-1, full resolution."""
    l = interval or config.keyframe_interval
    if segmenter_for is None:
        segmenter_for = lambda s: gt_oracle(list(s.labels), config.class_count,
                                            dtype=config.np_dtype)
    mats = [ConfusionMatrix.empty(config.class_count) for _ in range(l)]
    skipped = 0
    h, w = config.frame_hw
    for snippet in snippets:
        if len(snippet) < l:
            warnings.warn(f"snippet with {len(snippet)} frames skipped (interval {l})")
            skipped += 1
            continue
        anchor = len(snippet) - 1
        segmenter = segmenter_for(snippet)
        for i in range(l):
            start = anchor - i
            frames = [Tensor.wrap(f.astype(config.np_dtype))
                      for f in snippet.frames[start:anchor + 1]]
            seg = None
            for seg, _ in run_sequence(frames, config, models, segmenter,
                                       start_index=start):
                pass
            pred = upsample_to_full(seg, h, w)
            mats[i].add(snippet.labels[anchor], pred)
    per_distance = [miou(m) for m in mats]
    return EvalResult(avg_miou=float(np.mean(per_distance)),
                      min_miou=per_distance[-1],
                      per_distance=per_distance, skipped=skipped)


# ---------------------------------------------------------------------------
# complexity


def conv_flops(spec: ConvSpec, in_h: int, in_w: int) -> tuple[int, int, int]:
    """(flops, out_h, out_w) for one convolution layer."""
    kh, kw = spec.kernel.shape[2], spec.kernel.shape[3]
    oh = conv_out_size(in_h, kh, spec.stride, spec.dilation, spec.padding)
    ow = conv_out_size(in_w, kw, spec.stride, spec.dilation, spec.padding)
    n = spec.out_channels * oh * ow
    flops = 2 * n * spec.in_channels * kh * kw
    if spec.bias is not None:
        flops += n
    return flops, oh, ow


def resample_flops(channels: int, out_h: int, out_w: int, identity: bool) -> int:
    return 0 if identity else RESAMPLE_FLOPS_PER_ELEM * channels * out_h * out_w


@dataclass
class FlopsReport:
    keyframe: int
    nonkeyframe: int
    interval: int
    nonkey_stages: dict[str, int] = field(default_factory=dict)

    @property
    def interval_average(self) -> float:
        l = self.interval
        return (self.keyframe + (l - 1) * self.nonkeyframe) / l


def count_flops(models: Models, config: PipelineConfig,
                toy: ToySegParams | None = None) -> FlopsReport:
    h, w = config.frame_hw
    h8, w8 = config.eighth_hw
    hh, wh = config.flow_input_hw
    c = config.class_count
    d = models.bank.count

    stages: dict[str, int] = {}

    flow = resample_flops(3, hh, wh, identity=(hh, wh) == (h, w))
    ch, cw = hh, wh
    for _, spec in models.flow.layers()[:2]:
        f, ch, cw = conv_flops(spec, ch, cw)
        flow += f
    for _, spec in models.flow.layers()[2:6]:
        f, _, _ = conv_flops(spec, ch, cw)
        flow += f
    f, rh, rw = conv_flops(models.flow.head, ch, cw)
    flow += f + resample_flops(2, h8, w8, identity=(rh, rw) == (h8, w8))
    stages["flow"] = flow

    stages["warp"] = RESAMPLE_FLOPS_PER_ELEM * c * h8 * w8

    feat = resample_flops(3, h8, w8, identity=False)
    ih, iw = h8, w8
    for spec in models.intra.layers:
        f, ih, iw = conv_flops(spec, ih, iw)
        feat += f
    stages["feat"] = feat

    fuse = 0
    if config.propagation == "guided":
        if models.bank.learnable:
            k2 = models.bank.size ** 2
            fuse += d * 2 * c * h8 * w8 * k2
        # index shifts are free; the edge Laplacian is one shared 3x3 conv per class
        fuse += 2 * c * h8 * w8 * 9
        gh, gw = h8, w8
        for spec in models.guide.layers:
            f, gh, gw = conv_flops(spec, gh, gw)
            fuse += f
        fuse += FUSE_FLOPS_PER_CANDIDATE * (d + 1) * c * h8 * w8
    stages["fuse"] = fuse

    nonkey = sum(stages.values())

    kh, kw = config.keyframe_hw
    key = resample_flops(3, kh, kw, identity=(kh, kw) == (h, w))
    if config.segmenter == "toy":
        if toy is None:
            raise StateError("toy segmenter FLOPS requested but no toy parameters given")
        th, tw = kh, kw
        for spec in toy.layers:
            f, th, tw = conv_flops(spec, th, tw)
            key += f
        key += resample_flops(c, h8, w8, identity=(th, tw) == (h8, w8))
    else:
        key += resample_flops(c, h8, w8, identity=(kh // 8, kw // 8) == (h8, w8))

    return FlopsReport(keyframe=key, nonkeyframe=nonkey,
                       interval=config.keyframe_interval, nonkey_stages=stages)


def count_params(models: Models, toy: ToySegParams | None = None) -> dict[str, int]:
    """Exact element counts per module plus the total."""

    def spec_count(spec: ConvSpec) -> int:
        return spec.kernel.size + (spec.bias.size if spec.bias is not None else 0)

    out = {
        "flow": sum(spec_count(s) for _, s in models.flow.layers()),
        "intra": sum(spec_count(s) for s in models.intra.layers),
        "guide": sum(spec_count(s) for s in models.guide.layers)
                 + models.guide.edge_scale.size,
        "bank": models.bank.kernels.size if models.bank.learnable else 0,
    }
    if toy is not None:
        out["toy"] = sum(spec_count(s) for s in toy.layers)
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# runtime


@dataclass
class BreakdownReport:
    interval: int
    frames: int
    keyframe_count: int
    nonkey_count: int
    stage_means_ms: dict[str, float]
    stage_stds_ms: dict[str, float]
    keyframe_mean_ms: float
    fps: float
    compute_fps: float
    per_distance_miou: list[float] | None = None
    avg_miou: float | None = None
    min_miou: float | None = None

    def __post_init__(self):
        if self.per_distance_miou is not None \
                and len(self.per_distance_miou) != self.interval:
            raise ShapeError(
                f"per-distance list has {len(self.per_distance_miou)} entries "
                f"for interval {self.interval}")

    def to_dict(self) -> dict:
        return {
            "interval": self.interval,
            "frames": self.frames,
            "keyframe_count": self.keyframe_count,
            "nonkey_count": self.nonkey_count,
            "stage_means_ms": dict(self.stage_means_ms),
            "stage_stds_ms": dict(self.stage_stds_ms),
            "keyframe_mean_ms": self.keyframe_mean_ms,
            "fps": self.fps,
            "compute_fps": self.compute_fps,
            "per_distance_miou": self.per_distance_miou,
            "avg_miou": self.avg_miou,
            "min_miou": self.min_miou,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BreakdownReport":
        return cls(**data)

    def lines(self) -> list[str]:
        out = [f"interval {self.interval}: {self.fps:.2f} FPS end-to-end, "
               f"{self.compute_fps:.2f} FPS compute-only"]
        for s in STAGES:
            out.append(f"  {s:5s} {self.stage_means_ms[s]:8.3f} ms "
                       f"(std {self.stage_stds_ms[s]:.3f})")
        out.append(f"  keyframe {self.keyframe_mean_ms:8.3f} ms")
        if self.per_distance_miou is not None:
            dist = ", ".join(f"{v:.4f}" for v in self.per_distance_miou)
            out.append(f"  mIoU avg {self.avg_miou:.4f} min {self.min_miou:.4f} "
                       f"per-distance [{dist}]")
        return out


def bench(config: PipelineConfig, models: Models, segmenter: KeyframeSegmenter,
          frames: Sequence[Tensor], warmup: int = 2, reps: int = 3) -> BreakdownReport:
    """Measure per-stage wall times; warmup frames are run but not aggregated."""
    if reps < 1:
        raise ShapeError(f"reps must be >= 1, got {reps}")
    if warmup >= len(frames):
        raise ShapeError(f"warmup {warmup} leaves no measured frames of {len(frames)}")
    kept: list[StageTimes] = []
    all_times: list[StageTimes] = []
    wall_ns = 0
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        rep_times = [t for _, t in run_sequence(frames, config, models, segmenter)]
        t1 = time.perf_counter_ns()
        if t1 <= t0:
            raise VidsegError("monotonic clock failure: non-increasing timestamps")
        wall_ns += t1 - t0
        all_times.extend(rep_times)
        kept.extend(rep_times[warmup:])
    nonkey = [t for t in kept if t.kind == "nonkey"]
    key = [t for t in kept if t.kind == "key"]
    means, stds = {}, {}
    for s in STAGES:
        vals = np.array([getattr(t, f"{s}_us") for t in nonkey], dtype=np.float64)
        means[s] = float(vals.mean() / 1000) if vals.size else 0.0
        stds[s] = float(vals.std() / 1000) if vals.size else 0.0
    key_mean = float(np.mean([t.total_us for t in key]) / 1000) if key else 0.0
    total_frames = reps * len(frames)
    compute_us = sum(t.total_us for t in all_times)
    return BreakdownReport(
        interval=config.keyframe_interval, frames=total_frames,
        keyframe_count=len(key), nonkey_count=len(nonkey),
        stage_means_ms=means, stage_stds_ms=stds, keyframe_mean_ms=key_mean,
        fps=total_frames / (wall_ns / 1e9),
        compute_fps=total_frames / (compute_us / 1e6) if compute_us else float("inf"))
