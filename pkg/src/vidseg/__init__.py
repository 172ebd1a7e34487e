"""Streaming video semantic segmentation by flow-guided label propagation.

Keyframes are segmented by a pluggable image segmenter; every other frame is
predicted by warping the previous segmentation with a lightweight optical
flow estimate and repairing the warp with a per-pixel guided mixture of
shifted candidates and a crude current-frame segmentation.
"""

from .errors import (
    ShapeError,
    StateError,
    StorageError,
    UndefinedResultError,
    VidsegError,
)
from .tensor import ConvSpec, Tensor, bilinear_resize, conv2d, softmax_channels

__all__ = [
    "ConvSpec",
    "ShapeError",
    "StateError",
    "StorageError",
    "Tensor",
    "UndefinedResultError",
    "VidsegError",
    "bilinear_resize",
    "conv2d",
    "softmax_channels",
]
