"""Dense rank-3 tensor type and the basic image operations built on it.

A :class:`Tensor` is an immutable channels-by-height-by-width grid of reals,
the carrier for every array-valued quantity in the package. Two precisions
are supported: float64 for training and gradient checking, float32 for
inference and benchmarking. All operations are deterministic and sequential;
identical inputs produce bit-identical outputs.

Convolutions use zero padding; :func:`bilinear_resize` samples with
align-corners-false coordinates and clamps to the edge at borders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable (channels, height, width) array of float32 or float64."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None, copy: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"Tensor must be rank 3 (C, H, W), got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"Tensor dims must all be >= 1, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("Tensor contains non-finite elements")
        # guard a view so adopting an existing array never flips its flags
        guarded = arr.view()
        guarded.setflags(write=False)
        object.__setattr__(self, "data", guarded)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        return cls(arr, copy=False)

    @classmethod
    def zeros(cls, channels: int, height: int, width: int, dtype=np.float64) -> "Tensor":
        return cls.wrap(np.zeros((channels, height, width), dtype=dtype))

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float,
             dtype=np.float64) -> "Tensor":
        return cls.wrap(np.full((channels, height, width), value, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == dtype:
            return self
        return Tensor.wrap(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")


@dataclass(frozen=True)
class ConvSpec:
    """Weights and hyperparameters of one convolution layer.

    kernel has shape (out_channels, in_channels, k, k); bias, when present,
    one value per output channel. Padding is zero padding.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"ConvSpec kernel must be rank 4, got {self.kernel.shape}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"ConvSpec bias shape {self.bias.shape} does not match "
                f"{self.kernel.shape[0]} output channels")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"ConvSpec requires stride >= 1, dilation >= 1, padding >= 0; got "
                f"stride={self.stride}, dilation={self.dilation}, padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate x with spec's kernel stack (zero padding, stride, dilation)."""
    return Tensor.wrap(kernels.conv2d_fwd(
        x.data, spec.kernel, spec.bias,
        stride=spec.stride, dilation=spec.dilation, padding=spec.padding))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample x to (out_h, out_w); resizing to the same size is the identity."""
    return Tensor.wrap(kernels.resize_fwd(x.data, out_h, out_w))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across channels, stabilized by max subtraction."""
    return Tensor.wrap(kernels.softmax_fwd(x.data))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float64) -> np.ndarray:
    """Zero-mean uniform weights scaled by fan-in (variance 1/fan_in)."""
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_layer_init(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
                    stride: int = 1, dilation: int = 1, padding: int | None = None,
                    zero: bool = False, dtype=np.float64) -> ConvSpec:
    """Build a ConvSpec with fan-in uniform weights (or zeros) and zero bias."""
    if padding is None:
        padding = dilation * (k - 1) // 2
    if zero:
        w = np.zeros((out_ch, in_ch, k, k), dtype=dtype)
    else:
        w = uniform_init(rng, (out_ch, in_ch, k, k), fan_in=in_ch * k * k, dtype=dtype)
    b = np.zeros(out_ch, dtype=dtype)
    return ConvSpec(kernel=w, bias=b, stride=stride, dilation=dilation, padding=padding)
