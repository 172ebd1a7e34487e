"""Reverse-mode differentiation over the numpy kernels.

A :class:`GradTape` records every primitive executed during a forward pass,
together with the cached arrays each adjoint needs. Replaying the records in
reverse order accumulates one gradient per registered parameter. The taped
ops below mirror the kernels one-to-one and double as the inference path:
with ``tape=None`` they skip recording and just compute values.

Vars wrap plain ndarrays of any rank (parameters include rank-1 biases and
rank-4 kernel stacks). Ops never mutate values; gradient accumulation
allocates fresh arrays, so adjoint closures may return shared references.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .errors import ShapeError, StateError


class Var:
    """A value in the recorded computation, with a gradient slot."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Var:
    return Var(np.asarray(value), requires_grad=False)


class GradTape:
    """Ordered record of executed primitives, plus the registered parameters."""

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._params: dict[str, Var] = {}

    def parameter(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            raise StateError(f"parameter {name!r} registered twice")
        v = Var(value, requires_grad=True)
        self._params[name] = v
        return v

    @property
    def parameters(self) -> dict[str, Var]:
        return dict(self._params)

    def record(self, output: Var, inputs: tuple[Var, ...], backward_fn: Callable):
        self._records.append((output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def op_count(self, var: Var) -> int:
        """Number of recorded ops that consumed var (used by tests)."""
        return sum(1 for _, inputs, _ in self._records if any(v is var for v in inputs))

    def backward(self, loss: Var | None = None,
                 seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Replay adjoints in reverse; return one gradient per registered parameter.

        loss defaults to the output of the last recorded op; seed defaults to
        ones of the loss shape (a scalar loss gets seed 1.0).
        """
        if not self._records:
            raise StateError("backward() called before any forward op was recorded")
        if loss is None:
            loss = self._records[-1][0]
        for out, inputs, _ in self._records:
            out.grad = None
            for v in inputs:
                v.grad = None
        for v in self._params.values():
            v.grad = None
        if seed is None:
            seed = np.ones_like(loss.value)
        loss.grad = np.asarray(seed, dtype=loss.value.dtype)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for v, g in zip(inputs, grads):
                if g is None or not v.requires_grad:
                    continue
                v.grad = g if v.grad is None else v.grad + g
        result = {}
        for name, v in self._params.items():
            g = v.grad if v.grad is not None else np.zeros_like(v.value)
            if g.shape != v.value.shape:
                raise StateError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name!r} shape {v.value.shape}")
            result[name] = g
        return result


def backward(tape: GradTape, loss_grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Seed the tape's final output with loss_grad and return parameter gradients."""
    return tape.backward(loss=None, seed=loss_grad)


def _apply(tape: GradTape | None, inputs: tuple[Var, ...], value: np.ndarray,
           backward_fn: Callable) -> Var:
    requires = any(v.requires_grad for v in inputs)
    out = Var(value, requires_grad=requires)
    if tape is not None and requires:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# taped primitives


def conv2d(tape, x: Var, w: Var, b: Var | None, stride=1, dilation=1, padding=0) -> Var:
    bias = b.value if b is not None else None
    y = kernels.conv2d_fwd(x.value, w.value, bias, stride, dilation, padding)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(up):
        dx, dw, db = kernels.conv2d_bwd(
            x.value, w.value, stride, dilation, padding, up,
            need_x=x.requires_grad, need_w=w.requires_grad,
            need_b=b is not None and b.requires_grad)
        return (dx, dw) if b is None else (dx, dw, db)

    return _apply(tape, inputs, y, bwd)


def pad_edge(tape, x: Var, p: int) -> Var:
    y = kernels.pad_edge_fwd(x.value, p)
    return _apply(tape, (x,), y, lambda up: (kernels.pad_edge_bwd(up, p, x.value.shape),))


def bilinear_resize(tape, x: Var, out_h: int, out_w: int) -> Var:
    y = kernels.resize_fwd(x.value, out_h, out_w)
    return _apply(tape, (x,), y, lambda up: (kernels.resize_bwd(x.value.shape, up),))


def relu(tape, x: Var) -> Var:
    return _apply(tape, (x,), kernels.relu_fwd(x.value),
                  lambda up: (kernels.relu_bwd(x.value, up),))


def sigmoid(tape, x: Var) -> Var:
    y = kernels.sigmoid_fwd(x.value)
    return _apply(tape, (x,), y, lambda up: (kernels.sigmoid_bwd(y, up),))


def softmax_channels(tape, x: Var) -> Var:
    y = kernels.softmax_fwd(x.value)
    return _apply(tape, (x,), y, lambda up: (kernels.softmax_bwd(y, up),))


def add(tape, x: Var, y: Var) -> Var:
    if x.value.shape != y.value.shape:
        raise ShapeError(f"add: shapes {x.value.shape} and {y.value.shape} differ")
    return _apply(tape, (x, y), x.value + y.value, lambda up: (up, up))


def scale(tape, x: Var, c: float) -> Var:
    return _apply(tape, (x,), c * x.value, lambda up: (c * up,))


def mul_scalar(tape, x: Var, alpha: Var) -> Var:
    """Multiply x elementwise by a scalar parameter (shape (1,) or ())."""
    a = float(alpha.value.reshape(()))
    y = a * x.value

    def bwd(up):
        da = np.asarray(np.sum(up * x.value)).reshape(alpha.value.shape)
        return a * up, da

    return _apply(tape, (x, alpha), y, bwd)


def concat_channels(tape, parts: list[Var]) -> Var:
    sizes = [p.value.shape[0] for p in parts]
    y = np.concatenate([p.value for p in parts], axis=0)

    def bwd(up):
        grads = []
        start = 0
        for n in sizes:
            grads.append(up[start:start + n])
            start += n
        return tuple(grads)

    return _apply(tape, tuple(parts), y, bwd)


def warp(tape, prev: Var, flow: Var) -> Var:
    y = kernels.warp_fwd(prev.value, flow.value)

    def bwd(up):
        return kernels.warp_bwd(prev.value, flow.value, up,
                                need_prev=prev.requires_grad,
                                need_flow=flow.requires_grad)

    return _apply(tape, (prev, flow), y, bwd)


def shift_stack(tape, seg: Var, offsets: tuple[tuple[int, int], ...]) -> Var:
    """Stack clamp-to-edge shifts of seg, one per (dx, dy) offset: (D, C, h, w)."""
    y = np.stack([kernels.shift_fwd(seg.value, dx, dy) for dx, dy in offsets])

    def bwd(up):
        d = np.zeros_like(seg.value)
        for i, (dx, dy) in enumerate(offsets):
            d = d + kernels.shift_bwd(seg.value.shape, dx, dy, up[i])
        return (d,)

    return _apply(tape, (seg,), y, bwd)


def bank_conv(tape, seg: Var, bank_kernels: Var, pad: int) -> Var:
    """Convolve seg with every bank kernel (edge-padded), stacking to (D, C, h, w)."""
    xp = kernels.pad_edge_fwd(seg.value, pad)
    d_count = bank_kernels.value.shape[0]
    y = np.stack([kernels.shared_conv_fwd(xp, bank_kernels.value[d, 0])
                  for d in range(d_count)])

    def bwd(up):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(bank_kernels.value)
        for d in range(d_count):
            dx_d, dk_d = kernels.shared_conv_bwd(
                xp, bank_kernels.value[d, 0], up[d],
                need_x=seg.requires_grad, need_k=bank_kernels.requires_grad)
            if dx_d is not None:
                dxp += dx_d
            if dk_d is not None:
                dk[d, 0] = dk_d
        dseg = kernels.pad_edge_bwd(dxp, pad, seg.value.shape) if seg.requires_grad else None
        return dseg, dk

    return _apply(tape, (seg, bank_kernels), y, bwd)


def fuse(tape, shifts: Var, intra: Var, weights: Var) -> Var:
    """Mix the D shift candidates and the intra candidate with per-pixel weights."""
    d = shifts.value.shape[0]
    if weights.value.shape[0] != d + 1:
        raise ShapeError(
            f"fuse: guidance has {weights.value.shape[0]} channels but there are "
            f"{d} shift candidates + 1 intra candidate")
    stack = np.concatenate([shifts.value, intra.value[None]], axis=0)
    y = kernels.fuse_fwd(stack, weights.value)

    def bwd(up):
        d_stack, d_w = kernels.fuse_bwd(stack, weights.value, up)
        return d_stack[:d], d_stack[d], d_w

    return _apply(tape, (shifts, intra, weights), y, bwd)


def renorm(tape, x: Var) -> Var:
    y = kernels.renorm_fwd(x.value)
    return _apply(tape, (x,), y, lambda up: (kernels.renorm_bwd(x.value, y, up),))


def cross_entropy(tape, probs: Var, labels: np.ndarray) -> Var:
    y = kernels.cross_entropy_fwd(probs.value, labels)
    return _apply(tape, (probs,), y,
                  lambda up: (kernels.cross_entropy_bwd(probs.value, labels, up),))


def sum_all(tape, x: Var) -> Var:
    y = kernels.sum_all_fwd(x.value)
    return _apply(tape, (x,), y,
                  lambda up: (kernels.sum_all_bwd(x.value.shape, up, x.value.dtype),))
