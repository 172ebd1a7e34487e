"""Adjoints of every taped primitive against central finite differences."""

import numpy as np
import pytest

from vidseg import ShapeError, StateError
from vidseg import autodiff as ad
from vidseg.gradcheck import TOLERANCE, finite_diff_grad, rel_error


def fd_check(build, params):
    """Return max rel error over `params` (name -> array) for scalar graph `build`."""
    tape, loss = build()
    grads = tape.backward(loss)
    worst = 0.0
    for name, arr in params.items():
        numeric = finite_diff_grad(lambda: float(build()[1].value), arr)
        worst = max(worst, rel_error(grads[name], numeric))
    return worst


def test_backward_before_forward_is_state_error():
    tape = ad.GradTape()
    with pytest.raises(StateError):
        ad.backward(tape)


def test_duplicate_parameter_rejected():
    tape = ad.GradTape()
    tape.parameter("w", np.zeros(2))
    with pytest.raises(StateError):
        tape.parameter("w", np.zeros(2))


def test_linear_case_grad_is_input_sum(rng):
    # loss = sum(conv2d(x, w)) with a 1x1 kernel: d loss / d w = sum(x)
    x = rng.standard_normal((1, 4, 4))
    w = np.array([[[[0.7]]]])
    tape = ad.GradTape()
    wv = tape.parameter("w", w)
    loss = ad.sum_all(tape, ad.conv2d(tape, ad.constant(x), wv, None))
    grads = ad.backward(tape)
    np.testing.assert_allclose(grads["w"], [[[[x.sum()]]]], atol=1e-12)


def test_chain_rule_on_single_element():
    # z = sigmoid(sigmoid(x)); dz/dx = s'(s(x)) * s'(x), checked by hand
    x = np.array([[[0.3]]])
    tape = ad.GradTape()
    xv = tape.parameter("x", x)
    z = ad.sum_all(tape, ad.sigmoid(tape, ad.sigmoid(tape, xv)))
    grads = ad.backward(tape)

    def s(v):
        return 1.0 / (1.0 + np.exp(-v))

    inner = s(0.3)
    expected = s(inner) * (1 - s(inner)) * inner * (1 - inner)
    np.testing.assert_allclose(grads["x"][0, 0, 0], expected, atol=1e-12)


def test_unused_parameter_gets_zero_gradient(rng):
    x = rng.standard_normal((1, 3, 3))
    tape = ad.GradTape()
    used = tape.parameter("used", x.copy())
    unused = tape.parameter("unused", np.ones(3))
    loss = ad.sum_all(tape, ad.relu(tape, used))
    grads = tape.backward(loss)
    assert grads["unused"].shape == (3,)
    np.testing.assert_array_equal(grads["unused"], 0)


class TestFiniteDifferences:
    def test_conv2d(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            wv = tape.parameter("w", w)
            bv = tape.parameter("b", b)
            y = ad.conv2d(tape, xv, wv, bv, stride=1, dilation=2, padding=2)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"x": x, "w": w, "b": b}) < TOLERANCE

    def test_conv2d_strided(self, rng):
        x = rng.standard_normal((2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            wv = tape.parameter("w", w)
            y = ad.conv2d(tape, xv, wv, None, stride=2, padding=1)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"x": x, "w": w}) < TOLERANCE

    def test_bilinear_resize(self, rng):
        x = rng.standard_normal((2, 4, 5))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            y = ad.bilinear_resize(tape, xv, 6, 3)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_relu(self, rng):
        x = rng.standard_normal((2, 4, 4))
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from the kink

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, ad.relu(tape, xv)))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_sigmoid(self, rng):
        x = rng.standard_normal((3, 3, 3))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, xv))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_softmax_channels(self, rng):
        x = rng.standard_normal((4, 3, 3))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            y = ad.softmax_channels(tape, xv)
            # weighted sum so the gradient is not trivially zero
            return tape, ad.sum_all(tape, ad.sigmoid(tape, ad.scale(tape, y, 2.0)))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_pad_edge(self, rng):
        x = rng.standard_normal((2, 3, 4))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, ad.pad_edge(tape, xv, 2)))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_add_scale_concat(self, rng):
        x = rng.standard_normal((2, 3, 3))
        y = rng.standard_normal((2, 3, 3))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            yv = tape.parameter("y", y)
            z = ad.add(tape, ad.scale(tape, xv, 1.5), yv)
            c = ad.concat_channels(tape, [z, xv])
            return tape, ad.sum_all(tape, ad.sigmoid(tape, c))

        assert fd_check(build, {"x": x, "y": y}) < TOLERANCE

    def test_mul_scalar(self, rng):
        x = rng.standard_normal((2, 3, 3))
        alpha = np.array([1.3])

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            av = tape.parameter("alpha", alpha)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, ad.mul_scalar(tape, xv, av)))

        assert fd_check(build, {"x": x, "alpha": alpha}) < TOLERANCE

    def test_renorm(self, rng):
        x = rng.uniform(0.2, 2.0, size=(3, 4, 4))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, ad.renorm(tape, xv)))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_cross_entropy(self, rng):
        logits = rng.standard_normal((4, 4, 4))
        labels = rng.integers(0, 4, size=(4, 4))

        def build():
            tape = ad.GradTape()
            lv = tape.parameter("logits", logits)
            probs = ad.softmax_channels(tape, lv)
            return tape, ad.cross_entropy(tape, probs, labels)

        assert fd_check(build, {"logits": logits}) < TOLERANCE

    def test_fuse(self, rng):
        shifts = rng.uniform(0.1, 1.0, size=(3, 2, 3, 3))
        intra = rng.uniform(0.1, 1.0, size=(2, 3, 3))
        weights = rng.uniform(0.1, 1.0, size=(4, 3, 3))

        def build():
            tape = ad.GradTape()
            sv = tape.parameter("shifts", shifts)
            iv = tape.parameter("intra", intra)
            wv = tape.parameter("weights", weights)
            y = ad.fuse(tape, sv, iv, wv)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"shifts": shifts, "intra": intra, "weights": weights}) < TOLERANCE

    def test_shift_stack(self, rng):
        x = rng.standard_normal((2, 4, 4))
        offsets = ((0, 0), (1, 0), (-1, 1))

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            y = ad.shift_stack(tape, xv, offsets)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"x": x}) < TOLERANCE

    def test_bank_conv(self, rng):
        x = rng.standard_normal((2, 4, 4))
        ks = rng.standard_normal((3, 1, 3, 3)) * 0.3

        def build():
            tape = ad.GradTape()
            xv = tape.parameter("x", x)
            kv = tape.parameter("k", ks)
            y = ad.bank_conv(tape, xv, kv, pad=1)
            return tape, ad.sum_all(tape, ad.sigmoid(tape, y))

        assert fd_check(build, {"x": x, "k": ks}) < TOLERANCE


def test_fuse_channel_mismatch_rejected(rng):
    tape = ad.GradTape()
    shifts = ad.constant(rng.random((3, 2, 3, 3)))
    intra = ad.constant(rng.random((2, 3, 3)))
    weights = ad.constant(rng.random((5, 3, 3)))
    with pytest.raises(ShapeError):
        ad.fuse(tape, shifts, intra, weights)
