"""End-to-end training of the propagation stage on labeled frame windows.

Each batch samples one keyframe interval, builds windows of that many
consecutive frames ending at a labeled frame, crops them (crop side is 3/4
of the frame side, offsets snapped to multiples of 8 so the 1/8-scale
grids stay aligned), and runs the keyframe-to-final-frame chain. The
keyframe segmentation comes from the frozen oracle (ground-truth one-hot
here), so no gradient flows into keyframe segmentation; the cross-entropy
loss on the final frame's prediction backpropagates through every
propagation step. SGD with momentum updates parameters in place; weight
decay skips biases and the edge scale.

Training runs in float64: two runs with the same seed produce bit-identical
loss curves and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .config import FullConfig, OptimizerConfig
from .errors import ShapeError, StateError
from .pipeline import (
    Models,
    Param,
    degrade_keyframe,
    downsample_labels,
    init_models,
    lift_models,
    propagate_nonkey,
)
from .synthetic import Snippet
from .warp import SegTensor, labels_to_probs


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers plus the global iteration counter."""

    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def learning_rate(cfg: OptimizerConfig, iteration: int) -> float:
    """Staircase decay: base_lr * decay_factor ** floor(iteration / decay_every)."""
    return cfg.base_lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def sgd_step(params: Sequence[Param], grads: dict[str, np.ndarray],
             state: OptimizerState, cfg: OptimizerConfig) -> None:
    """v <- momentum*v + g + weight_decay*w; w <- w - lr(iter)*v (in place)."""
    lr = learning_rate(cfg, state.iteration)
    for p in params:
        g = grads[p.name]
        if g.shape != p.array.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name!r} shape {p.array.shape}")
        if p.decay and cfg.weight_decay:
            g = g + cfg.weight_decay * p.array
        v = state.velocities.get(p.name)
        if v is None:
            v = np.zeros_like(p.array)
            state.velocities[p.name] = v
        v *= cfg.momentum
        v += g
        np.subtract(p.array, lr * v, out=p.array)
    state.iteration += 1


def loss_cross_entropy(pred: SegTensor, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean -log(prob at true class) and its gradient seed w.r.t. pred."""
    if not pred.is_probs:
        raise ShapeError("cross-entropy expects probability-valued predictions")
    loss = kernels.cross_entropy_fwd(pred.data, labels)
    grad = kernels.cross_entropy_bwd(pred.data, labels, np.float64(1.0))
    return float(loss), grad


@dataclass(frozen=True)
class TrainSample:
    """One cropped window: keyframe first, label for the final frame."""

    frames: tuple[np.ndarray, ...]
    label_small: np.ndarray
    key_seg: np.ndarray
    interval: int
    crop: tuple[int, int]


def crop_shape(config: FullConfig) -> tuple[int, int]:
    p, t = config.pipeline, config.train
    ch = int(round(p.frame_height * t.crop_fraction))
    cw = int(round(p.frame_width * t.crop_fraction))
    if ch % 8 or cw % 8:
        raise ShapeError(
            f"crop {(ch, cw)} (fraction {t.crop_fraction} of {p.frame_hw}) must be "
            f"divisible by 8")
    fh, fw = ch * p.flow_input_scale, cw * p.flow_input_scale
    if fh != int(fh) or fw != int(fw) or int(fh) % 4 or int(fw) % 4:
        raise ShapeError(f"crop {(ch, cw)} scaled for the flow net must divide by 4")
    return ch, cw


def sample_window(rng: np.random.Generator, snippets: Sequence[Snippet],
                  interval: int, config: FullConfig) -> TrainSample:
    p = config.pipeline
    ch, cw = crop_shape(config)
    s = snippets[int(rng.integers(len(snippets)))]
    if len(s) < interval:
        raise ShapeError(f"snippet of {len(s)} frames too short for interval {interval}")
    end = int(rng.integers(interval - 1, len(s)))
    start = end - interval + 1
    h, w = s.frames[0].shape[1:]
    oy = 8 * int(rng.integers(0, (h - ch) // 8 + 1))
    ox = 8 * int(rng.integers(0, (w - cw) // 8 + 1))
    frames = tuple(np.ascontiguousarray(f[:, oy:oy + ch, ox:ox + cw])
                   for f in s.frames[start:end + 1])
    label_small = downsample_labels(s.labels[end][oy:oy + ch, ox:ox + cw])
    key_small = downsample_labels(s.labels[start][oy:oy + ch, ox:ox + cw])
    # the frozen keyframe segmenter stand-in is deliberately imperfect, like
    # the pretrained model it replaces; propagation must learn to repair it
    key_seg = degrade_keyframe(key_small, p.class_count, rng,
                               config.synthetic.oracle_flip_rate,
                               config.synthetic.oracle_confidence,
                               blob_count=config.synthetic.oracle_blob_count,
                               blob_size=config.synthetic.oracle_blob_size)
    return TrainSample(frames=frames, label_small=label_small, key_seg=key_seg,
                       interval=interval, crop=(oy, ox))


def run_window(tape, models: Models, config: FullConfig,
               sample: TrainSample) -> ad.Var | None:
    """Propagate a window on the tape; None when the window is a bare keyframe."""
    p = config.pipeline
    mv = lift_models(tape, models)
    prev_seg: ad.Var = ad.constant(sample.key_seg)
    h, w = sample.frames[0].shape[1:]
    hh = int(round(h * p.flow_input_scale))
    wh = int(round(w * p.flow_input_scale))
    prev_half = kernels.resize_fwd(sample.frames[0], hh, wh)
    seg_var = None
    for frame in sample.frames[1:]:
        seg_var, prev_half = propagate_nonkey(tape, mv, p, prev_seg, prev_half, frame)
        prev_seg = seg_var
    return seg_var


@dataclass
class TrainResult:
    models: Models
    opt_state: OptimizerState
    curve: list[tuple[int, float, float]]  # (iteration, lr, mean batch loss)


def train(snippets: Sequence[Snippet], config: FullConfig, iterations: int,
          seed: int, models: Models | None = None,
          opt_state: OptimizerState | None = None,
          progress: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train for `iterations` batches; resumable via the persisted iteration count."""
    p, o, t = config.pipeline, config.optimizer, config.train
    if p.dtype != "float64":
        raise StateError("training requires the float64 build (config dtype)")
    if not snippets:
        raise ShapeError("empty training dataset")
    if not t.intervals:
        raise ShapeError("no training intervals configured")
    models = models if models is not None else init_models(p, seed=seed)
    opt_state = opt_state or OptimizerState()
    params = models.parameters()
    rng = np.random.default_rng(np.random.SeedSequence([seed, opt_state.iteration]))
    curve: list[tuple[int, float, float]] = []
    for _ in range(iterations):
        interval = int(t.intervals[int(rng.integers(len(t.intervals)))])
        grad_acc = {q.name: np.zeros_like(q.array) for q in params}
        loss_sum = 0.0
        for _ in range(o.batch_size):
            sample = sample_window(rng, snippets, interval, config)
            tape = ad.GradTape()
            seg_var = run_window(tape, models, config, sample)
            if seg_var is None:
                # keyframe-only window: frozen segmenter, no propagation ops
                loss_sum += float(kernels.cross_entropy_fwd(sample.key_seg,
                                                            sample.label_small))
                continue
            loss_var = ad.cross_entropy(tape, seg_var, sample.label_small)
            loss_sum += float(loss_var.value)
            for name, g in tape.backward(loss_var).items():
                grad_acc[name] += g
        mean_grads = {name: g / o.batch_size for name, g in grad_acc.items()}
        it = opt_state.iteration
        lr = learning_rate(o, it)
        mean_loss = loss_sum / o.batch_size
        sgd_step(params, mean_grads, opt_state, o)
        curve.append((it, lr, mean_loss))
        if progress is not None:
            progress(it, lr, mean_loss)
    return TrainResult(models=models, opt_state=opt_state, curve=curve)


def gradient_flow_audit(snippets: Sequence[Snippet], config: FullConfig,
                        models: Models | None = None, seed: int = 0,
                        interval: int = 3) -> dict[str, bool]:
    """Whether each parameter receives a nonzero gradient on one window.

    Freshly initialized models have zero-initialized flow and guidance heads,
    which block gradients into the layers behind them for the very first
    update; pass models that have taken a step or two for a meaningful audit.
    """
    if interval < 2:
        raise ShapeError("audit needs a propagation window (interval >= 2)")
    rng = np.random.default_rng(seed)
    sample = sample_window(rng, snippets, interval, config)
    models = models if models is not None else init_models(config.pipeline, seed=seed)
    tape = ad.GradTape()
    seg_var = run_window(tape, models, config, sample)
    loss_var = ad.cross_entropy(tape, seg_var, sample.label_small)
    grads = tape.backward(loss_var)
    return {name: bool(np.any(g != 0)) for name, g in grads.items()}
