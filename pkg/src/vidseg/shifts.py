"""Spatial propagation: enumerate shifted copies of the warped segmentation.

A bank of K-by-K unit-impulse kernels turns the warped map into D candidate
segmentations, each a pure spatial shift. The fast path moves indices
directly (no multiplies); it is bit-identical to convolving with the
impulse kernels on an edge-replicated input. Borders clamp to the edge,
consistent with the warping stage, so probability vectors are replicated
rather than zeroed.

Offset ordering is a serialization contract: (0, 0) always comes first,
followed by the remaining (dx, dy) pairs in row-major order (dy outer,
dx inner). Guided fusion relies on this index alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor
from .warp import SegTensor

Offset = tuple[int, int]


def _ordered(offsets: list[Offset]) -> tuple[Offset, ...]:
    rest = sorted(o for o in offsets if o != (0, 0))
    ordered = [(0, 0)] + [(dx, dy) for dy, dx in
                          sorted(((dy, dx) for dx, dy in rest))]
    return tuple(ordered)


def default_offsets(size: int) -> tuple[Offset, ...]:
    """Default (dx, dy) offsets for a K-by-K bank.

    K=1: identity only. K=3: all 9 offsets of {-1,0,1}^2. K=5: the inner 3x3
    plus the 8 axis and diagonal extremes at distance 2, 17 patterns total.
    Other odd K: the full K^2 grid.
    """
    r = (size - 1) // 2
    if size == 5:
        offsets = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        offsets += [(2, 0), (-2, 0), (0, 2), (0, -2), (2, 2), (2, -2), (-2, 2), (-2, -2)]
    else:
        offsets = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return _ordered(offsets)


@dataclass(frozen=True)
class KernelBank:
    """Ordered impulse (or learned) kernels realizing the candidate shifts."""

    size: int
    offsets: tuple[Offset, ...]
    kernels: np.ndarray  # (D, 1, K, K)
    learnable: bool = False

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def pad(self) -> int:
        return (self.size - 1) // 2

    @property
    def identity_slot(self) -> int:
        return self.offsets.index((0, 0))


def make_bank(size: int = 3, subset: list[Offset] | None = None,
              learnable: bool = False, dtype=np.float64) -> KernelBank:
    """Build a bank of unit-impulse shift kernels.

    subset, when given, selects which offsets to keep (deduplicated ordering
    contract still applies); otherwise the defaults for the kernel size are
    used. Learnable banks start from the same impulse patterns.
    """
    if size < 1 or size % 2 == 0:
        raise ShapeError(f"kernel size must be odd and >= 1, got {size}")
    r = (size - 1) // 2
    if subset is None:
        offsets = default_offsets(size)
    else:
        offsets = [(int(dx), int(dy)) for dx, dy in subset]
        if len(set(offsets)) != len(offsets):
            raise ShapeError(f"duplicate offsets in subset: {offsets}")
        for dx, dy in offsets:
            if abs(dx) > r or abs(dy) > r:
                raise ShapeError(f"offset ({dx}, {dy}) outside +-{r} for size {size}")
        if (0, 0) not in offsets:
            raise ShapeError("offset subset must include the identity (0, 0)")
        offsets = _ordered(offsets)
    ks = np.zeros((len(offsets), 1, size, size), dtype=dtype)
    for i, (dx, dy) in enumerate(offsets):
        ks[i, 0, dy + r, dx + r] = 1.0
    return KernelBank(size=size, offsets=offsets, kernels=ks, learnable=learnable)


@dataclass(frozen=True)
class ShiftStack:
    """The D shifted candidates, stacked as (D, C, h, w) in bank offset order."""

    stack: np.ndarray
    offsets: tuple[Offset, ...]

    def candidate(self, i: int) -> np.ndarray:
        return self.stack[i]


def propagate_spatial(seg: SegTensor, bank: KernelBank) -> ShiftStack:
    """Produce the candidate shifts of seg.

    Impulse banks use direct index moves; learnable banks convolve the
    edge-padded input with each kernel (identical results at impulse
    initialization).
    """
    data = seg.data
    if data.shape[1] < bank.size or data.shape[2] < bank.size:
        raise ShapeError(
            f"segmentation {data.shape} smaller than kernel size {bank.size}")
    if bank.learnable:
        xp = kernels.pad_edge_fwd(data, bank.pad)
        kb = bank.kernels.astype(data.dtype, copy=False)
        stack = np.stack([kernels.shared_conv_fwd(xp, kb[d, 0])
                          for d in range(bank.count)])
    else:
        stack = np.stack([kernels.shift_fwd(data, dx, dy) for dx, dy in bank.offsets])
    return ShiftStack(stack=stack, offsets=bank.offsets)
