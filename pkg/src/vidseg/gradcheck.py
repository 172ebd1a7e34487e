"""Finite-difference verification of every registered adjoint.

Central differences with eps=1e-5 in float64; an op passes when the
infinity-norm relative error between analytic and numeric gradients is
below 1e-4. Checks run on tiny tensors so the whole suite stays fast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

EPS = 1e-5
TOLERANCE = 1e-4


def finite_diff_grad(f: Callable[[], float], param: np.ndarray,
                     eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of scalar-valued f w.r.t. param (perturbed in place)."""
    g = np.zeros_like(param)
    flat = param.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm relative error, robust to all-zero gradients."""
    diff = np.abs(analytic - numeric).max()
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(diff / denom)


@dataclass
class OpCheck:
    name: str
    max_rel_error: float
    passed: bool
    note: str = ""


@dataclass
class GradReport:
    checks: list[OpCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            detail = c.note if c.note else f"max rel err {c.max_rel_error:.3e}"
            out.append(f"{status}  {c.name:<28s} {detail}")
        return out


def check_scalar_chain(name: str, build: Callable[[], tuple["ad.GradTape", "ad.Var"]],
                       tolerance: float = TOLERANCE) -> OpCheck:
    """FD-check every parameter of a scalar-loss graph built by `build`.

    `build` must construct a fresh tape, register parameters backed by arrays
    that persist across calls (so in-place FD perturbation is visible), run
    the forward pass, and return (tape, loss_var).
    """
    tape, loss = build()
    grads = tape.backward(loss)
    worst = 0.0
    for pname, var in tape.parameters.items():
        array = var.value

        def f(array=array):
            t, ls = build()
            return float(ls.value)

        numeric = finite_diff_grad(f, array)
        worst = max(worst, rel_error(grads[pname], numeric))
    return OpCheck(name=name, max_rel_error=worst, passed=worst < tolerance)


# ---------------------------------------------------------------------------
# the full harness


def _op_checks(rng) -> list[OpCheck]:
    checks = []

    def loss_of(tape, var):
        return ad.sum_all(tape, ad.sigmoid(tape, var))

    x_conv = rng.standard_normal((2, 5, 5))
    w_conv = rng.standard_normal((3, 2, 3, 3))
    b_conv = rng.standard_normal(3)

    def conv_build():
        tape = ad.GradTape()
        y = ad.conv2d(tape, tape.parameter("x", x_conv), tape.parameter("w", w_conv),
                      tape.parameter("b", b_conv), padding=1)
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("conv2d", conv_build))

    x_sd = rng.standard_normal((2, 6, 6))
    w_sd = rng.standard_normal((2, 2, 3, 3))

    def conv_sd_build():
        tape = ad.GradTape()
        y = ad.conv2d(tape, tape.parameter("x", x_sd), tape.parameter("w", w_sd),
                      None, stride=2, dilation=2, padding=2)
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("conv2d-strided-dilated", conv_sd_build))

    x_rs = rng.standard_normal((2, 4, 6))

    def resize_build():
        tape = ad.GradTape()
        y = ad.bilinear_resize(tape, tape.parameter("x", x_rs), 6, 3)
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("bilinear_resize", resize_build))

    x_sm = rng.standard_normal((4, 4, 4))

    def softmax_build():
        tape = ad.GradTape()
        y = ad.softmax_channels(tape, tape.parameter("x", x_sm))
        return tape, loss_of(tape, ad.scale(tape, y, 3.0))

    checks.append(check_scalar_chain("softmax_channels", softmax_build))

    x_rl = rng.standard_normal((2, 4, 4))
    x_rl = np.where(np.abs(x_rl) < 0.05, 0.4, x_rl)

    def relu_build():
        tape = ad.GradTape()
        return tape, loss_of(tape, ad.relu(tape, tape.parameter("x", x_rl)))

    checks.append(check_scalar_chain("relu", relu_build))

    x_sg = rng.standard_normal((2, 4, 4))

    def sigmoid_build():
        tape = ad.GradTape()
        return tape, ad.sum_all(tape, ad.sigmoid(tape, tape.parameter("x", x_sg)))

    checks.append(check_scalar_chain("sigmoid", sigmoid_build))

    x_pd = rng.standard_normal((2, 3, 4))

    def pad_build():
        tape = ad.GradTape()
        return tape, loss_of(tape, ad.pad_edge(tape, tape.parameter("x", x_pd), 2))

    checks.append(check_scalar_chain("pad_edge", pad_build))

    x_ms = rng.standard_normal((2, 3, 3))
    a_ms = np.array([0.8])

    def mul_scalar_build():
        tape = ad.GradTape()
        y = ad.mul_scalar(tape, tape.parameter("x", x_ms), tape.parameter("alpha", a_ms))
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("mul_scalar", mul_scalar_build))

    prev_w = rng.uniform(0.1, 1.0, size=(2, 5, 5))
    flow_w = rng.integers(-1, 2, size=(2, 5, 5)) + rng.uniform(0.2, 0.8, (2, 5, 5))

    def warp_build():
        tape = ad.GradTape()
        y = ad.warp(tape, tape.parameter("prev", prev_w), tape.parameter("flow", flow_w))
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("warp", warp_build))

    x_sh = rng.standard_normal((2, 4, 4))

    def shift_build():
        tape = ad.GradTape()
        y = ad.shift_stack(tape, tape.parameter("x", x_sh),
                           ((0, 0), (1, 0), (-1, 1), (0, -1)))
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("shift_stack", shift_build))

    x_bk = rng.standard_normal((2, 4, 4))
    k_bk = rng.standard_normal((3, 1, 3, 3)) * 0.4

    def bank_build():
        tape = ad.GradTape()
        y = ad.bank_conv(tape, tape.parameter("x", x_bk), tape.parameter("k", k_bk), 1)
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("bank_conv", bank_build))

    s_fu = rng.uniform(0.1, 1.0, size=(3, 2, 4, 4))
    i_fu = rng.uniform(0.1, 1.0, size=(2, 4, 4))
    g_fu = rng.uniform(0.1, 1.0, size=(4, 4, 4))

    def fuse_build():
        tape = ad.GradTape()
        y = ad.fuse(tape, tape.parameter("shifts", s_fu), tape.parameter("intra", i_fu),
                    tape.parameter("weights", g_fu))
        return tape, loss_of(tape, y)

    checks.append(check_scalar_chain("fuse", fuse_build))

    x_rn = rng.uniform(0.2, 2.0, size=(3, 4, 4))

    def renorm_build():
        tape = ad.GradTape()
        return tape, loss_of(tape, ad.renorm(tape, tape.parameter("x", x_rn)))

    checks.append(check_scalar_chain("renorm", renorm_build))

    logits_ce = rng.standard_normal((3, 4, 4))
    labels_ce = rng.integers(0, 3, size=(4, 4))

    def ce_build():
        tape = ad.GradTape()
        probs = ad.softmax_channels(tape, tape.parameter("logits", logits_ce))
        return tape, ad.cross_entropy(tape, probs, labels_ce)

    checks.append(check_scalar_chain("softmax+cross_entropy", ce_build))

    x_cm = rng.standard_normal((2, 3, 3))
    y_cm = rng.standard_normal((2, 3, 3))

    def combo_build():
        tape = ad.GradTape()
        xv = tape.parameter("x", x_cm)
        yv = tape.parameter("y", y_cm)
        z = ad.concat_channels(tape, [ad.add(tape, xv, yv), ad.scale(tape, xv, 0.5)])
        return tape, loss_of(tape, z)

    checks.append(check_scalar_chain("add+scale+concat", combo_build))
    return checks


def _randomize_biases(models):
    """Nonzero biases keep relu pre-activations off the kink during FD."""
    from .pipeline import Models  # local import to avoid a cycle
    from .tensor import ConvSpec

    rng = np.random.default_rng(99)

    def jitter(spec):
        return ConvSpec(kernel=spec.kernel.copy(),
                        bias=rng.uniform(0.02, 0.1, spec.bias.shape),
                        stride=spec.stride, dilation=spec.dilation,
                        padding=spec.padding)

    from .flow import FlowNetParams
    from .fusion import GuideNetParams
    from .intra import IntraNetParams

    head = jitter(models.flow.head)
    head = ConvSpec(kernel=rng.uniform(-0.2, 0.2, head.kernel.shape), bias=head.bias,
                    stride=head.stride, dilation=head.dilation, padding=head.padding)
    return Models(
        flow=FlowNetParams(stem=tuple(jitter(s) for s in models.flow.stem),
                           dilated=tuple(jitter(d) for d in models.flow.dilated),
                           head=head),
        intra=IntraNetParams(layers=tuple(jitter(s) for s in models.intra.layers)),
        guide=GuideNetParams(layers=tuple(jitter(s) for s in models.guide.layers),
                             edge_scale=models.guide.edge_scale.copy()),
        bank=models.bank)


def _chain_check(seed: int) -> OpCheck:
    """FD-check the composed non-keyframe step: flow, warp, shifts, edge,
    guidance, fusion, renormalization, cross-entropy."""
    from .config import PipelineConfig
    from .pipeline import init_models, lift_models, propagate_nonkey
    from . import kernels

    rng = np.random.default_rng(seed)
    config = PipelineConfig(class_count=3, frame_height=24, frame_width=24,
                            flow_width=4, intra_width=4, guide_width=4, toy_width=4)
    models = _randomize_biases(init_models(config, seed=seed))
    prev_frame = rng.random((3, 24, 24))
    frame = np.roll(prev_frame, 1, axis=2) * 0.9 + 0.1 * rng.random((3, 24, 24))
    raw = rng.uniform(0.1, 1.0, size=(3, 3, 3))
    prev_seg = raw / raw.sum(axis=0)
    labels = rng.integers(0, 3, size=(3, 3))
    prev_half = kernels.resize_fwd(prev_frame, 12, 12)

    def build():
        tape = ad.GradTape()
        mv = lift_models(tape, models)
        seg, _ = propagate_nonkey(tape, mv, config, ad.constant(prev_seg),
                                  prev_half, frame)
        return tape, ad.cross_entropy(tape, seg, labels)

    return check_scalar_chain("composed-nonkey-chain", build)


def gradcheck_all(seed: int = 0) -> GradReport:
    """Run every adjoint check plus the composed chain; see GradReport.lines()."""
    rng = np.random.default_rng(seed)
    checks = _op_checks(rng)
    checks.append(OpCheck(
        name="edge-argmax", max_rel_error=0.0, passed=True,
        note="non-differentiable, gradient blocked (edge scale checked via mul_scalar)"))
    checks.append(_chain_check(seed))
    return GradReport(checks=checks)
