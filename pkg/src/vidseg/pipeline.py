"""Keyframe scheduling and frame-to-frame propagation.

Every l-th frame is segmented from scratch by the configured keyframe
segmenter; frames in between are predicted by warping the previous
segmentation along the estimated flow and repairing it with the guided
per-pixel fusion. All state lives in a small :class:`PipelineState`, so a
sequence of any length streams in constant memory. Keyframes reset the
chain: their output depends only on the current frame.

Non-keyframe work is split into four timed stages for the benchmark
harness: flow estimation (including downscaling the frame for the flow
net), temporal warping, feature extraction (downscaling plus the intra
net), and fusion (candidate shifts, edge map, guidance, mixing, and the
probability renormalization guard).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Protocol

import numpy as np

from . import autodiff as ad
from . import kernels
from .config import PipelineConfig
from .errors import ShapeError, StateError
from .flow import FlowNetParams, FlowVars, flow_forward, init_flow_params, lift_flow
from .fusion import (
    GuideNetParams,
    edge_response,
    guide_forward,
    init_guide_params,
    lift_guide,
)
from .intra import IntraNetParams, init_intra_params, intra_forward, lift_intra
from .shifts import KernelBank, make_bank
from .tensor import ConvSpec, Tensor, conv_layer_init
from .warp import PROBS, SegTensor, labels_to_probs

LABEL_SUBSAMPLE_OFFSET = 4  # block-center sampling when reducing labels 8x


@dataclass(frozen=True)
class Param:
    """One trainable array with its weight-decay tag."""

    name: str
    array: np.ndarray
    decay: bool


@dataclass(frozen=True)
class Models:
    """All trainable pieces of the propagation stage."""

    flow: FlowNetParams
    intra: IntraNetParams
    guide: GuideNetParams
    bank: KernelBank

    def parameters(self) -> list[Param]:
        out = []
        for lname, spec in self.flow.layers():
            out.append(Param(f"flow.{lname}.weight", spec.kernel, decay=True))
            out.append(Param(f"flow.{lname}.bias", spec.bias, decay=False))
        for i, spec in enumerate(self.intra.layers):
            out.append(Param(f"intra.{i}.weight", spec.kernel, decay=True))
            out.append(Param(f"intra.{i}.bias", spec.bias, decay=False))
        for i, spec in enumerate(self.guide.layers):
            out.append(Param(f"guide.{i}.weight", spec.kernel, decay=True))
            out.append(Param(f"guide.{i}.bias", spec.bias, decay=False))
        out.append(Param("guide.edge_scale", self.guide.edge_scale, decay=False))
        if self.bank.learnable:
            out.append(Param("bank.kernels", self.bank.kernels, decay=True))
        return out


def init_models(config: PipelineConfig, seed: int = 0, dtype=np.float64) -> Models:
    rng = np.random.default_rng(seed)
    bank = make_bank(config.kernel_size, config.kernel_subset,
                     config.kernel_learnable, dtype=dtype)
    return Models(
        flow=init_flow_params(rng, config.flow_width, dtype=dtype),
        intra=init_intra_params(rng, config.class_count, config.intra_width, dtype=dtype),
        guide=init_guide_params(rng, config.class_count, bank.count + 1,
                                config.guide_width, dtype=dtype),
        bank=bank)


def _cast_spec(spec: ConvSpec, dtype) -> ConvSpec:
    return ConvSpec(kernel=spec.kernel.astype(dtype),
                    bias=None if spec.bias is None else spec.bias.astype(dtype),
                    stride=spec.stride, dilation=spec.dilation, padding=spec.padding)


def cast_models(models: Models, dtype) -> Models:
    if models.flow.head.kernel.dtype == dtype:
        return models
    return Models(
        flow=FlowNetParams(
            stem=tuple(_cast_spec(s, dtype) for s in models.flow.stem),
            dilated=tuple(_cast_spec(s, dtype) for s in models.flow.dilated),
            head=_cast_spec(models.flow.head, dtype)),
        intra=IntraNetParams(layers=tuple(_cast_spec(s, dtype) for s in models.intra.layers)),
        guide=GuideNetParams(
            layers=tuple(_cast_spec(s, dtype) for s in models.guide.layers),
            edge_scale=models.guide.edge_scale.astype(dtype)),
        bank=KernelBank(size=models.bank.size, offsets=models.bank.offsets,
                        kernels=models.bank.kernels.astype(dtype),
                        learnable=models.bank.learnable))


@dataclass
class ModelVars:
    """Models lifted into tape Vars (constants when tape is None)."""

    flow: FlowVars
    intra: list
    guide_layers: list
    alpha: ad.Var
    bank: KernelBank
    bank_kernels: ad.Var | None


def lift_models(tape, models: Models) -> ModelVars:
    guide_layers, alpha = lift_guide(tape, models.guide)
    if models.bank.learnable:
        bank_kernels = (ad.constant(models.bank.kernels) if tape is None
                        else tape.parameter("bank.kernels", models.bank.kernels))
    else:
        bank_kernels = None
    return ModelVars(flow=lift_flow(tape, models.flow),
                     intra=lift_intra(tape, models.intra),
                     guide_layers=guide_layers, alpha=alpha,
                     bank=models.bank, bank_kernels=bank_kernels)


# ---------------------------------------------------------------------------
# keyframe segmenters


class KeyframeSegmenter(Protocol):
    """Image segmenter contract: probabilities at 1/8 of its input resolution."""

    def segment(self, frame: Tensor, frame_index: int | None = None) -> SegTensor:
        ...


class OracleSegmenter:
    """Serves precomputed probability maps by frame index (pretrained stand-in)."""

    def __init__(self, loader: Callable[[int], SegTensor]):
        self._loader = loader

    def segment(self, frame: Tensor, frame_index: int | None = None) -> SegTensor:
        if frame_index is None:
            raise StateError("oracle segmenter requires the frame index")
        seg = self._loader(frame_index)
        if not seg.is_probs:
            raise ShapeError("oracle segmentation files must hold probabilities")
        return seg


def downsample_labels(labels: np.ndarray, factor: int = 8) -> np.ndarray:
    """Reduce a label map by block-center sampling (offset 4 within each block)."""
    if labels.shape[0] % factor or labels.shape[1] % factor:
        raise ShapeError(f"label dims {labels.shape} not divisible by {factor}")
    off = LABEL_SUBSAMPLE_OFFSET if factor == 8 else factor // 2
    return labels[off::factor, off::factor]


def gt_oracle(labels: list[np.ndarray], class_count: int,
              dtype=np.float64) -> OracleSegmenter:
    """Oracle serving one-hot maps derived from ground-truth labels."""

    def loader(index: int) -> SegTensor:
        if not 0 <= index < len(labels):
            raise StateError(f"no ground-truth labels for frame {index}")
        small = downsample_labels(labels[index])
        return labels_to_probs(small, class_count, dtype=dtype)

    return OracleSegmenter(loader)


def degrade_keyframe(labels_small: np.ndarray, class_count: int,
                     rng: np.random.Generator, flip_rate: float,
                     confidence: float, blob_count: int = 0,
                     blob_size: int = 3, dtype=np.float64) -> np.ndarray:
    """Probabilities a realistically imperfect segmenter might emit.

    Cells adjacent to a class boundary flip to the class of a random
    4-neighbor with probability flip_rate; blob_count random rectangles of
    up to blob_size cells per side are reassigned to a random class (the
    gross failures fast segmenters produce); the served distribution puts
    `confidence` on the resulting class and spreads the rest. flip_rate 0,
    blob_count 0 and confidence 1 reproduce the exact one-hot oracle.
    """
    lab = labels_small.copy()
    h, w = lab.shape
    if flip_rate > 0:
        pad = np.pad(lab, 1, mode="edge")
        neighbors = np.stack([pad[:-2, 1:-1], pad[2:, 1:-1],
                              pad[1:-1, :-2], pad[1:-1, 2:]])
        boundary = (neighbors != lab[None]).any(axis=0)
        flip = boundary & (rng.random(lab.shape) < flip_rate)
        pick = rng.integers(0, 4, size=lab.shape)
        lab = np.where(flip, np.take_along_axis(neighbors, pick[None], 0)[0], lab)
    for _ in range(blob_count):
        bh = int(rng.integers(1, blob_size + 1))
        bw = int(rng.integers(1, blob_size + 1))
        by = int(rng.integers(0, max(h - bh, 0) + 1))
        bx = int(rng.integers(0, max(w - bw, 0) + 1))
        lab[by:by + bh, bx:bx + bw] = int(rng.integers(0, class_count))
    onehot = (lab[None] == np.arange(class_count)[:, None, None]).astype(dtype)
    if confidence >= 1.0:
        return onehot
    rest = (1.0 - confidence) / (class_count - 1)
    return onehot * (confidence - rest) + rest


def noisy_gt_oracle(labels: list[np.ndarray], class_count: int, seed: int,
                    flip_rate: float, confidence: float, blob_count: int = 0,
                    blob_size: int = 3, dtype=np.float64) -> OracleSegmenter:
    """gt_oracle degraded per frame with a deterministic error pattern."""

    def loader(index: int) -> SegTensor:
        if not 0 <= index < len(labels):
            raise StateError(f"no ground-truth labels for frame {index}")
        small = downsample_labels(labels[index])
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        probs = degrade_keyframe(small, class_count, rng, flip_rate, confidence,
                                 blob_count=blob_count, blob_size=blob_size,
                                 dtype=dtype)
        return SegTensor(Tensor.wrap(probs), semantics=PROBS)

    return OracleSegmenter(loader)


@dataclass(frozen=True)
class ToySegParams:
    """Trainable stand-in for a real image segmenter: three stride-2 convs
    and a head, reaching 1/8 resolution."""

    layers: tuple[ConvSpec, ConvSpec, ConvSpec, ConvSpec]

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_channels


def init_toy_params(rng: np.random.Generator, class_count: int, width: int = 128,
                    dtype=np.float64) -> ToySegParams:
    return ToySegParams(layers=(
        conv_layer_init(rng, width, 3, 3, stride=2, dtype=dtype),
        conv_layer_init(rng, width, width, 3, stride=2, dtype=dtype),
        conv_layer_init(rng, width, width, 3, stride=2, dtype=dtype),
        conv_layer_init(rng, class_count, width, 3, dtype=dtype)))


class ToySegmenter:
    def __init__(self, params: ToySegParams):
        self.params = params

    def segment(self, frame: Tensor, frame_index: int | None = None) -> SegTensor:
        if frame.height % 8 or frame.width % 8:
            raise ShapeError(f"toy segmenter input dims must divide by 8, got {frame.shape}")
        x = frame.data
        layers = self.params.layers
        for i, spec in enumerate(layers):
            x = kernels.conv2d_fwd(x, spec.kernel, spec.bias, spec.stride,
                                   spec.dilation, spec.padding)
            if i < len(layers) - 1:
                x = kernels.relu_fwd(x)
        return SegTensor(Tensor.wrap(kernels.softmax_fwd(x)), semantics=PROBS)


# ---------------------------------------------------------------------------
# propagation


@dataclass(frozen=True)
class PipelineState:
    prev_seg: SegTensor
    prev_half: np.ndarray | None  # frame pre-downscaled for the flow net
    frames_since_key: int


@dataclass(frozen=True)
class StageTimes:
    index: int
    kind: str  # "key" | "nonkey"
    flow_us: int = 0
    warp_us: int = 0
    feat_us: int = 0
    fuse_us: int = 0
    total_us: int = 0

    @property
    def stage_sum_us(self) -> int:
        return self.flow_us + self.warp_us + self.feat_us + self.fuse_us


def _identity_guidance(bank: KernelBank, h: int, w: int, dtype) -> np.ndarray:
    g = np.zeros((bank.count + 1, h, w), dtype=dtype)
    g[bank.identity_slot] = 1.0
    return g


def propagate_nonkey(tape, mv: ModelVars, config: PipelineConfig, prev_seg: ad.Var,
                     prev_half: np.ndarray, frame: np.ndarray,
                     mark: Callable[[str], None] | None = None):
    """One non-keyframe prediction; works on any 8-divisible frame size.

    Returns (segmentation Var, current half-scale frame for the next step).
    Stage marks fire at flow / warp / feat / fuse boundaries plus "end".
    """
    mark = mark or (lambda name: None)
    _, h, w = frame.shape
    h8, w8 = h // 8, w // 8
    hh = int(round(h * config.flow_input_scale))
    wh = int(round(w * config.flow_input_scale))

    mark("flow")
    cur_half = kernels.resize_fwd(frame, hh, wh)
    flow_var = flow_forward(tape, mv.flow, ad.constant(prev_half),
                            ad.constant(cur_half), (h8, w8))

    mark("warp")
    warped = ad.warp(tape, prev_seg, flow_var)

    mark("feat")
    if config.propagation == "guided":
        eighth = kernels.resize_fwd(frame, h8, w8)
        intra_logits = intra_forward(tape, mv.intra, ad.constant(eighth))

    mark("fuse")
    if config.propagation == "warp_only":
        seg = ad.renorm(tape, warped)
    else:
        if mv.bank.learnable:
            shifts = ad.bank_conv(tape, warped, mv.bank_kernels, mv.bank.pad)
        else:
            shifts = ad.shift_stack(tape, warped, mv.bank.offsets)
        if config.guidance_override == "identity":
            weights = ad.constant(_identity_guidance(mv.bank, h8, w8, frame.dtype))
        else:
            # both guidance inputs are observations: the argmax blocks the edge
            # path, and the intra logits are detached symmetrically so the
            # intra net trains only through its own prediction slot
            resp = edge_response(warped.value)
            edges = ad.sigmoid(tape, ad.mul_scalar(tape, ad.constant(resp), mv.alpha))
            raw = guide_forward(tape, mv.guide_layers,
                                ad.constant(intra_logits.value), edges)
            weights = ad.softmax_channels(tape, raw)
        intra_probs = ad.softmax_channels(tape, intra_logits)
        fused = ad.fuse(tape, shifts, intra_probs, weights)
        seg = ad.renorm(tape, fused)
    mark("end")
    return seg, cur_half


def _now_us() -> int:
    return time.perf_counter_ns() // 1000


def step(state: PipelineState | None, frame: Tensor, config: PipelineConfig,
         models: Models, segmenter: KeyframeSegmenter, frame_index: int = 0,
         _mv: ModelVars | None = None) -> tuple[SegTensor, PipelineState, StageTimes]:
    """Advance the pipeline by one frame. state=None starts a fresh sequence."""
    h, w = config.frame_hw
    if frame.shape != (3, h, w):
        raise ShapeError(f"frame shape {frame.shape} does not match configured (3, {h}, {w})")
    frame = frame.astype(config.np_dtype)
    c = config.class_count
    h8, w8 = config.eighth_hw
    l = config.keyframe_interval
    t0 = _now_us()

    if state is None or state.frames_since_key == 0:
        kh, kw = config.keyframe_hw
        seg_input = frame if (kh, kw) == (h, w) else \
            Tensor.wrap(kernels.resize_fwd(frame.data, kh, kw))
        seg = segmenter.segment(seg_input, frame_index)
        if seg.class_count != c:
            raise ShapeError(
                f"segmenter produced {seg.class_count} classes, config says {c}")
        if seg.scores.shape[1:] != (h8, w8):
            seg = SegTensor(Tensor.wrap(kernels.resize_fwd(seg.data, h8, w8)),
                            semantics=PROBS)
        prev_half = None
        if l > 1:
            hh, wh = config.flow_input_hw
            prev_half = kernels.resize_fwd(frame.data, hh, wh)
        new_state = PipelineState(prev_seg=seg, prev_half=prev_half,
                                  frames_since_key=1 % l)
        times = StageTimes(index=frame_index, kind="key", total_us=_now_us() - t0)
        return seg, new_state, times

    mv = _mv if _mv is not None else lift_models(None, models)
    marks: list[tuple[str, int]] = []
    seg_var, cur_half = propagate_nonkey(
        None, mv, config, ad.constant(state.prev_seg.data), state.prev_half,
        frame.data, mark=lambda name: marks.append((name, _now_us())))
    seg = SegTensor(Tensor.wrap(seg_var.value), semantics=PROBS)
    new_state = PipelineState(prev_seg=seg, prev_half=cur_half,
                              frames_since_key=(state.frames_since_key + 1) % l)
    stamps = dict(marks)
    times = StageTimes(
        index=frame_index, kind="nonkey",
        flow_us=stamps["warp"] - stamps["flow"],
        warp_us=stamps["feat"] - stamps["warp"],
        feat_us=stamps["fuse"] - stamps["feat"],
        fuse_us=stamps["end"] - stamps["fuse"],
        total_us=_now_us() - t0)
    return seg, new_state, times


def run_sequence(frames: Iterable[Tensor], config: PipelineConfig, models: Models,
                 segmenter: KeyframeSegmenter,
                 start_index: int = 0) -> Iterator[tuple[SegTensor, StageTimes]]:
    """Stream segmentations for a frame source; constant memory in its length."""
    models = cast_models(models, config.np_dtype)
    mv = lift_models(None, models)
    state = None
    it = iter(frames)
    index = start_index
    while True:
        try:
            frame = next(it)
        except StopIteration:
            return
        except OSError as e:
            raise StateError(f"failed reading frame {index}: {e}") from e
        seg, state, times = step(state, frame, config, models, segmenter,
                                 frame_index=index, _mv=mv)
        yield seg, times
        index += 1


def upsample_to_full(seg: SegTensor, height: int, width: int) -> np.ndarray:
    """Bilinear 8x upsample of the scores, then per-pixel argmax (ties: lowest)."""
    c, h8, w8 = seg.scores.shape
    if (height, width) != (h8 * 8, w8 * 8):
        raise ShapeError(
            f"target {(height, width)} is not 8x the segmentation grid {(h8, w8)}")
    scores = kernels.resize_fwd(seg.data, height, width)
    return scores.argmax(axis=0)
