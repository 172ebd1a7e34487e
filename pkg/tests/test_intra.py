"""Intra-frame segmentation head: shape preservation and gradients."""

import numpy as np
import pytest

from vidseg import ShapeError, Tensor, softmax_channels
from vidseg import autodiff as ad
from vidseg.gradcheck import TOLERANCE, finite_diff_grad, rel_error
from vidseg.intra import IntraNetParams, init_intra_params, intra_forward, intra_segment, lift_intra
from vidseg.tensor import conv_layer_init


def test_zero_head_gives_uniform_probs(rng):
    base = init_intra_params(rng, class_count=4, width=8)
    params = IntraNetParams(layers=(base.layers[0], base.layers[1],
                                    conv_layer_init(rng, 4, 8, 3, zero=True)))
    frame = Tensor.wrap(rng.random((3, 6, 6)))
    logits = intra_segment(params, frame)
    np.testing.assert_array_equal(logits.data, 0.0)
    probs = softmax_channels(logits.scores)
    np.testing.assert_allclose(probs.data, 0.25, atol=1e-12)


@pytest.mark.parametrize("hw", [(6, 6), (5, 9), (12, 8)])
def test_spatial_dims_preserved(rng, hw):
    params = init_intra_params(rng, class_count=3, width=4)
    frame = Tensor.wrap(rng.random((3, *hw)))
    out = intra_segment(params, frame)
    assert out.data.shape == (3, *hw)
    assert out.semantics == "logits"


def test_non_rgb_input_rejected(rng):
    params = init_intra_params(rng, class_count=3, width=4)
    with pytest.raises(ShapeError):
        intra_segment(params, Tensor.zeros(4, 6, 6))


def test_layer_count_enforced(rng):
    good = init_intra_params(rng, class_count=2, width=4)
    with pytest.raises(ShapeError):
        IntraNetParams(layers=good.layers[:2])  # type: ignore[arg-type]


def test_parameter_count_formula(rng):
    # (3*9*Wi + Wi) + (Wi*9*Wi + Wi) + (Wi*9*C + C) for Wi=16, C=4 -> 3348
    params = init_intra_params(rng, class_count=4, width=16)
    total = sum(spec.kernel.size + spec.bias.size for spec in params.layers)
    assert total == 448 + 2320 + 580 == 3348


def test_gradients_match_finite_differences(rng):
    params = init_intra_params(rng, class_count=3, width=3)
    frame = rng.random((3, 5, 5))

    def build():
        tape = ad.GradTape()
        layers = lift_intra(tape, params)
        out = intra_forward(tape, layers, ad.constant(frame))
        return tape, ad.sum_all(tape, ad.sigmoid(tape, out))

    tape, loss = build()
    grads = tape.backward(loss)
    worst = 0.0
    for name, var in tape.parameters.items():
        numeric = finite_diff_grad(lambda: float(build()[1].value), var.value)
        worst = max(worst, rel_error(grads[name], numeric))
    assert worst < TOLERANCE
