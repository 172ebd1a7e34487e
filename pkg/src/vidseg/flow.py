"""Lightweight two-frame optical flow estimator.

The estimator concatenates the two input frames channel-wise, downscales
twice with stride-2 convolutions, then applies four parallel 3x3
convolutions with dilations 1, 2, 4 and 8 to the shared stem output. Their
rectified outputs are combined by cumulative pairwise aggregation::

    s1 = d1 + d2;  s2 = s1 + d3;  s3 = s2 + d4;  combined = (s1 + s2 + s3) / 3

A final 3x3 convolution maps the combined features to a 2-channel flow at
one quarter of the estimator's input resolution, which is bilinearly
resized to the requested output grid. The head is zero-initialized so an
untrained estimator predicts zero motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .tensor import ConvSpec, Tensor, conv_layer_init

FLOW_DILATIONS = (1, 2, 4, 8)


@dataclass(frozen=True)
class FlowField:
    """Backward motion vectors in downscaled-pixel units.

    vectors has shape (2, h, w): channel 0 is the horizontal component
    (+x rightward), channel 1 the vertical component (+y downward).
    """

    vectors: Tensor

    def __post_init__(self):
        if self.vectors.channels != 2:
            raise ShapeError(f"FlowField needs 2 channels, got {self.vectors.shape}")

    @property
    def data(self) -> np.ndarray:
        return self.vectors.data


@dataclass(frozen=True)
class FlowNetParams:
    stem: tuple[ConvSpec, ConvSpec]
    dilated: tuple[ConvSpec, ConvSpec, ConvSpec, ConvSpec]
    head: ConvSpec

    def __post_init__(self):
        if len(self.stem) != 2 or any(s.stride != 2 for s in self.stem):
            raise ShapeError("flow stem must be two stride-2 convolutions")
        if tuple(c.dilation for c in self.dilated) != FLOW_DILATIONS:
            raise ShapeError(
                f"flow dilation sequence must be {FLOW_DILATIONS}, got "
                f"{tuple(c.dilation for c in self.dilated)}")
        if self.head.out_channels != 2:
            raise ShapeError(f"flow head must emit 2 channels, got {self.head.out_channels}")

    def layers(self) -> list[tuple[str, ConvSpec]]:
        named = [(f"stem{i}", s) for i, s in enumerate(self.stem)]
        named += [(f"dilated{i}", d) for i, d in enumerate(self.dilated)]
        named.append(("head", self.head))
        return named


def init_flow_params(rng: np.random.Generator, width: int = 32,
                     dtype=np.float64) -> FlowNetParams:
    stem = (conv_layer_init(rng, width, 6, 3, stride=2, dtype=dtype),
            conv_layer_init(rng, width, width, 3, stride=2, dtype=dtype))
    dilated = tuple(conv_layer_init(rng, width, width, 3, dilation=d, dtype=dtype)
                    for d in FLOW_DILATIONS)
    head = conv_layer_init(rng, 2, width, 3, zero=True, dtype=dtype)
    return FlowNetParams(stem=stem, dilated=dilated, head=head)


@dataclass
class FlowVars:
    stem: list[tuple[ad.Var, ad.Var, ConvSpec]]
    dilated: list[tuple[ad.Var, ad.Var, ConvSpec]]
    head: tuple[ad.Var, ad.Var, ConvSpec]


def lift_flow(tape, params: FlowNetParams, prefix: str = "flow") -> FlowVars:
    def lift(name, spec):
        if tape is None:
            return ad.constant(spec.kernel), ad.constant(spec.bias), spec
        return (tape.parameter(f"{prefix}.{name}.weight", spec.kernel),
                tape.parameter(f"{prefix}.{name}.bias", spec.bias), spec)

    return FlowVars(
        stem=[lift(f"stem{i}", s) for i, s in enumerate(params.stem)],
        dilated=[lift(f"dilated{i}", d) for i, d in enumerate(params.dilated)],
        head=lift("head", params.head))


def _conv(tape, x, layer, activate: bool):
    w, b, spec = layer
    y = ad.conv2d(tape, x, w, b, stride=spec.stride, dilation=spec.dilation,
                  padding=spec.padding)
    return ad.relu(tape, y) if activate else y


def flow_forward(tape, fv: FlowVars, prev: ad.Var, cur: ad.Var,
                 out_hw: tuple[int, int]) -> ad.Var:
    """Estimate flow from two frame Vars; output resized to out_hw."""
    x = ad.concat_channels(tape, [prev, cur])
    for layer in fv.stem:
        x = _conv(tape, x, layer, activate=True)
    d = [_conv(tape, x, layer, activate=True) for layer in fv.dilated]
    s1 = ad.add(tape, d[0], d[1])
    s2 = ad.add(tape, s1, d[2])
    s3 = ad.add(tape, s2, d[3])
    combined = ad.scale(tape, ad.add(tape, ad.add(tape, s1, s2), s3), 1.0 / 3.0)
    raw = _conv(tape, combined, fv.head, activate=False)
    return ad.bilinear_resize(tape, raw, out_hw[0], out_hw[1])


def estimate_flow(params: FlowNetParams, frame_prev: Tensor, frame_cur: Tensor,
                  out_hw: tuple[int, int] | None = None) -> FlowField:
    """Estimate backward motion from frame_cur to frame_prev.

    Both frames must share shape; spatial dims must be divisible by 4 so the
    two stride-2 stages and the quarter-resolution head line up exactly.
    out_hw defaults to one quarter of the input resolution.
    """
    if frame_prev.shape != frame_cur.shape:
        raise ShapeError(
            f"flow input frames differ: {frame_prev.shape} vs {frame_cur.shape}")
    _, h, w = frame_prev.shape
    if h % 4 or w % 4:
        raise ShapeError(f"flow input dims must be divisible by 4, got {(h, w)}")
    if out_hw is None:
        out_hw = (h // 4, w // 4)
    fv = lift_flow(None, params)
    out = flow_forward(None, fv, ad.constant(frame_prev.data),
                       ad.constant(frame_cur.data), out_hw)
    return FlowField(Tensor.wrap(out.value))
