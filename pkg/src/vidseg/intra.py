"""Crude single-frame segmentation of the downscaled current frame.

Three 3x3 convolutions at stride 1 (no resolution change), rectified
between layers, mapping the 1/8-downscaled RGB frame to per-class logits.
Deliberately tiny: it only has to be right where temporal propagation
fails, e.g. newly revealed content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .tensor import ConvSpec, Tensor, conv_layer_init
from .warp import LOGITS, SegTensor


@dataclass(frozen=True)
class IntraNetParams:
    layers: tuple[ConvSpec, ConvSpec, ConvSpec]

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ShapeError(f"intra net must have exactly 3 layers, got {len(self.layers)}")
        if any(c.stride != 1 for c in self.layers):
            raise ShapeError("intra net layers must all be stride 1")

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_channels


def init_intra_params(rng: np.random.Generator, class_count: int, width: int = 32,
                      dtype=np.float64) -> IntraNetParams:
    # zero head: the untrained net predicts the uniform distribution, a
    # neutral candidate that hedges stale propagation without ever being
    # confidently wrong (same stable-start idea as the zero flow head)
    return IntraNetParams(layers=(
        conv_layer_init(rng, width, 3, 3, dtype=dtype),
        conv_layer_init(rng, width, width, 3, dtype=dtype),
        conv_layer_init(rng, class_count, width, 3, zero=True, dtype=dtype)))


def lift_intra(tape, params: IntraNetParams, prefix: str = "intra"):
    out = []
    for i, spec in enumerate(params.layers):
        if tape is None:
            out.append((ad.constant(spec.kernel), ad.constant(spec.bias), spec))
        else:
            out.append((tape.parameter(f"{prefix}.{i}.weight", spec.kernel),
                        tape.parameter(f"{prefix}.{i}.bias", spec.bias), spec))
    return out


def intra_forward(tape, layers, frame_small: ad.Var) -> ad.Var:
    x = frame_small
    for i, (w, b, spec) in enumerate(layers):
        x = ad.conv2d(tape, x, w, b, stride=spec.stride, dilation=spec.dilation,
                      padding=spec.padding)
        if i < len(layers) - 1:
            x = ad.relu(tape, x)
    return x


def intra_segment(params: IntraNetParams, frame_small: Tensor) -> SegTensor:
    """Logits for the 1/8-downscaled current frame, same spatial dims as input."""
    if frame_small.channels != 3:
        raise ShapeError(f"intra input must be RGB (3 channels), got {frame_small.shape}")
    layers = lift_intra(None, params)
    out = intra_forward(None, layers, ad.constant(frame_small.data))
    return SegTensor(Tensor.wrap(out.value), semantics=LOGITS)
