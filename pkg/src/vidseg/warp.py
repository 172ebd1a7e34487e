"""Backward warping of segmentation maps along a flow field.

Each output pixel samples the previous segmentation at its own location
plus the flow vector, bilinearly, with out-of-range coordinates clamped to
the border so probability mass is never replaced by zeros. The same sample
weights apply to every class channel, which keeps per-pixel channel sums
intact. Integer-valued flows therefore act as exact permutations with
border clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .flow import FlowField
from .tensor import Tensor

PROB_SUM_TOL = 1e-5
PROB_BOUND_TOL = 1e-9

LOGITS = "logits"
PROBS = "probs"


@dataclass(frozen=True)
class SegTensor:
    """Per-class segmentation scores at 1/8 scale, tagged logits or probabilities."""

    scores: Tensor
    semantics: str = PROBS

    def __post_init__(self):
        if self.semantics not in (LOGITS, PROBS):
            raise ShapeError(f"semantics must be 'logits' or 'probs', got {self.semantics!r}")
        if self.semantics == PROBS:
            d = self.scores.data
            if d.min() < -PROB_BOUND_TOL or d.max() > 1 + PROB_BOUND_TOL:
                raise ShapeError(
                    f"probability values outside [0, 1]: min {d.min()}, max {d.max()}")
            sums = d.sum(axis=0)
            err = np.abs(sums - 1).max()
            if err > PROB_SUM_TOL:
                raise ShapeError(
                    f"per-pixel probability sums deviate from 1 by {err:.3e} "
                    f"(tolerance {PROB_SUM_TOL})")

    @property
    def data(self) -> np.ndarray:
        return self.scores.data

    @property
    def class_count(self) -> int:
        return self.scores.channels

    @property
    def is_probs(self) -> bool:
        return self.semantics == PROBS


def _check_spatial(prev: SegTensor, flow: FlowField):
    if prev.scores.shape[1:] != flow.vectors.shape[1:]:
        raise ShapeError(
            f"warp: segmentation {prev.scores.shape} and flow {flow.vectors.shape} "
            f"have different spatial dims")


def warp_segmentation(prev: SegTensor, flow: FlowField) -> SegTensor:
    """Initial current-frame estimate: sample prev at destination-plus-flow."""
    _check_spatial(prev, flow)
    out = kernels.warp_fwd(prev.data, flow.data)
    return SegTensor(Tensor.wrap(out), semantics=prev.semantics)


def warp_grad(prev: SegTensor, flow: FlowField,
              upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of warp_segmentation w.r.t. the source values and the flow."""
    _check_spatial(prev, flow)
    if upstream.shape != prev.scores.shape:
        raise ShapeError(
            f"warp_grad: upstream shape {upstream.shape} does not match "
            f"segmentation {prev.scores.shape}")
    d_prev, d_flow = kernels.warp_bwd(prev.data, flow.data, upstream)
    return d_prev, d_flow


def labels_to_probs(labels: np.ndarray, class_count: int,
                    dtype=np.float64) -> SegTensor:
    """One-hot probability map from a class-index grid (no ignore labels allowed)."""
    if labels.min() < 0 or labels.max() >= class_count:
        raise ShapeError(
            f"labels outside [0, {class_count}): min {labels.min()}, max {labels.max()}")
    onehot = (labels[None] == np.arange(class_count)[:, None, None]).astype(dtype)
    return SegTensor(Tensor.wrap(onehot), semantics=PROBS)
