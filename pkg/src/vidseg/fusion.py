"""Guided per-pixel fusion of the shifted candidates and the intra prediction.

The edge map flags likely propagation failures: the warped segmentation is
collapsed to its per-pixel argmax (one-hot, ties to the lowest class), each
class plane is convolved with the fixed 4-neighbor Laplacian on an
edge-replicated border (so flat regions respond exactly zero), absolute
responses are summed over classes, and a sigmoid with a learnable scale
squashes the result. No gradient flows through the argmax; only the scale
receives one.

The guiding network maps intra logits concatenated with the edge map to one
mixing weight per candidate; a channel softmax makes the per-pixel weights
a convex combination. Fusion then takes, at every pixel, the inner product
of those weights with the candidate values of each class - the same weights
shared by all classes. Candidate order is bank offset order with the intra
prediction in the final slot, a contract recorded in serialized models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ShapeError
from .shifts import ShiftStack
from .tensor import ConvSpec, Tensor, conv_layer_init
from .warp import SegTensor

LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])

GUIDE_SUM_TOL = 1e-6


@dataclass(frozen=True)
class EdgeMap:
    """Sigmoid-squashed Laplacian response of the warped argmax, in [0, 1]."""

    response: Tensor

    def __post_init__(self):
        if self.response.channels != 1:
            raise ShapeError(f"EdgeMap must have 1 channel, got {self.response.shape}")
        d = self.response.data
        if d.min() < 0 or d.max() > 1:
            raise ShapeError(f"EdgeMap values outside [0, 1]: {d.min()}..{d.max()}")

    @property
    def data(self) -> np.ndarray:
        return self.response.data


@dataclass(frozen=True)
class GuidanceField:
    """Raw and channel-normalized per-pixel mixing weights, (D+1, h, w)."""

    raw: Tensor
    normalized: Tensor

    def __post_init__(self):
        if self.raw.shape != self.normalized.shape:
            raise ShapeError(
                f"guidance raw {self.raw.shape} and normalized "
                f"{self.normalized.shape} differ")
        n = self.normalized.data
        if n.min() < 0:
            raise ShapeError(f"normalized guidance has negative entries: {n.min()}")
        err = np.abs(n.sum(axis=0) - 1).max()
        if err > GUIDE_SUM_TOL:
            raise ShapeError(f"normalized guidance sums deviate by {err:.3e}")

    @property
    def data(self) -> np.ndarray:
        return self.normalized.data


@dataclass(frozen=True)
class GuideNetParams:
    """Three conv layers mapping (intra logits ++ edge map) to D+1 weights,
    plus the learnable edge-scale."""

    layers: tuple[ConvSpec, ConvSpec, ConvSpec]
    edge_scale: np.ndarray  # shape (1,)

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ShapeError(f"guide net must have exactly 3 layers, got {len(self.layers)}")
        if any(c.stride != 1 for c in self.layers):
            raise ShapeError("guide net layers must all be stride 1")
        if self.edge_scale.shape != (1,):
            raise ShapeError(f"edge_scale must have shape (1,), got {self.edge_scale.shape}")

    @property
    def guidance_channels(self) -> int:
        return self.layers[-1].out_channels


def init_guide_params(rng: np.random.Generator, class_count: int, candidates: int,
                      width: int = 32, dtype=np.float64) -> GuideNetParams:
    """candidates = D + 1 output channels; zero-init head mixes uniformly."""
    return GuideNetParams(
        layers=(conv_layer_init(rng, width, class_count + 1, 3, dtype=dtype),
                conv_layer_init(rng, width, width, 3, dtype=dtype),
                conv_layer_init(rng, candidates, width, 3, zero=True, dtype=dtype)),
        edge_scale=np.ones(1, dtype=dtype))


def edge_response(scores: np.ndarray) -> np.ndarray:
    """Per-pixel sum over classes of |Laplacian| of the one-hot argmax, (1, h, w).

    Non-differentiable by construction (argmax); callers treat it as a
    constant. Integer arithmetic throughout, so the result is exact.
    """
    c = scores.shape[0]
    am = scores.argmax(axis=0)
    onehot = (am[None] == np.arange(c)[:, None, None]).astype(scores.dtype)
    padded = kernels.pad_edge_fwd(onehot, 1)
    lap = kernels.shared_conv_fwd(padded, LAPLACIAN.astype(scores.dtype))
    return np.abs(lap).sum(axis=0, keepdims=True)


def edge_map(warped: SegTensor, alpha: float) -> EdgeMap:
    """sigmoid(alpha * edge_response(warped))."""
    resp = edge_response(warped.data)
    return EdgeMap(Tensor.wrap(kernels.sigmoid_fwd(alpha * resp)))


def lift_guide(tape, params: GuideNetParams, prefix: str = "guide"):
    layers = []
    for i, spec in enumerate(params.layers):
        if tape is None:
            layers.append((ad.constant(spec.kernel), ad.constant(spec.bias), spec))
        else:
            layers.append((tape.parameter(f"{prefix}.{i}.weight", spec.kernel),
                           tape.parameter(f"{prefix}.{i}.bias", spec.bias), spec))
    if tape is None:
        alpha = ad.constant(params.edge_scale)
    else:
        alpha = tape.parameter(f"{prefix}.edge_scale", params.edge_scale)
    return layers, alpha


def guide_forward(tape, layers, intra_logits: ad.Var, edges: ad.Var) -> ad.Var:
    """Raw guidance from concatenated intra logits and edge map."""
    x = ad.concat_channels(tape, [intra_logits, edges])
    for i, (w, b, spec) in enumerate(layers):
        x = ad.conv2d(tape, x, w, b, stride=spec.stride, dilation=spec.dilation,
                      padding=spec.padding)
        if i < len(layers) - 1:
            x = ad.relu(tape, x)
    return x


def guide(params: GuideNetParams, intra_logits: SegTensor, edges: EdgeMap) -> GuidanceField:
    """Per-pixel mixing weights over the D+1 candidates."""
    if intra_logits.scores.shape[1:] != edges.response.shape[1:]:
        raise ShapeError(
            f"guide: intra {intra_logits.scores.shape} and edge "
            f"{edges.response.shape} spatial dims differ")
    layers, _ = lift_guide(None, params)
    raw = guide_forward(None, layers, ad.constant(intra_logits.data),
                        ad.constant(edges.data))
    normalized = kernels.softmax_fwd(raw.value)
    return GuidanceField(raw=Tensor.wrap(raw.value), normalized=Tensor.wrap(normalized))


def fuse(shifts: ShiftStack, intra: SegTensor, guidance: GuidanceField) -> SegTensor:
    """Per-pixel convex mix of the D shift candidates and the intra candidate."""
    d, c = shifts.stack.shape[0], shifts.stack.shape[1]
    if intra.data.shape != shifts.stack.shape[1:]:
        raise ShapeError(
            f"fuse: intra {intra.data.shape} does not match candidates "
            f"{shifts.stack.shape[1:]}")
    if guidance.data.shape[0] != d + 1:
        raise ShapeError(
            f"fuse: guidance has {guidance.data.shape[0]} channels, expected {d + 1}")
    stack = np.concatenate([shifts.stack, intra.data[None]], axis=0)
    out = kernels.fuse_fwd(stack, guidance.data)
    return SegTensor(Tensor.wrap(out), semantics=intra.semantics)
