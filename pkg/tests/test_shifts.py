"""Shift bank construction and candidate generation against conv oracles."""

import numpy as np
import pytest

from vidseg import ConvSpec, ShapeError, Tensor, conv2d
from vidseg.kernels import pad_edge_fwd
from vidseg.shifts import default_offsets, make_bank, propagate_spatial
from vidseg.warp import SegTensor


def random_seg(rng, c=3, h=6, w=7):
    raw = rng.uniform(0.05, 1.0, size=(c, h, w))
    return SegTensor(Tensor.wrap(raw / raw.sum(axis=0)), semantics="probs")


def conv_shift_oracle(seg_data, bank):
    """Convolve the edge-replicated input with each impulse kernel via conv2d."""
    pad = bank.pad
    padded = Tensor.wrap(pad_edge_fwd(seg_data, pad))
    out = []
    for d in range(bank.count):
        k = bank.kernels[d]  # (1, K, K), same kernel for every channel
        c = seg_data.shape[0]
        full = np.zeros((c, c, bank.size, bank.size))
        for ci in range(c):
            full[ci, ci] = k[0]
        out.append(conv2d(padded, ConvSpec(kernel=full)).data)
    return np.stack(out)


class TestMakeBank:
    def test_default_k3(self):
        bank = make_bank(3)
        assert bank.count == 9
        assert bank.offsets[0] == (0, 0)
        assert set(bank.offsets) == {(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
        # remaining offsets in row-major order (dy outer, dx inner)
        assert bank.offsets[1:] == ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0),
                                    (-1, 1), (0, 1), (1, 1))
        center = bank.kernels[0, 0]
        assert center[1, 1] == 1.0 and center.sum() == 1.0

    def test_default_k5_has_17_patterns(self):
        bank = make_bank(5)
        assert bank.count == 17
        assert bank.offsets[0] == (0, 0)
        for dx, dy in [(2, 0), (-2, 0), (0, 2), (0, -2), (2, 2), (2, -2), (-2, 2), (-2, -2)]:
            assert (dx, dy) in bank.offsets

    def test_k1_is_identity_only(self):
        bank = make_bank(1)
        assert bank.count == 1
        assert bank.offsets == ((0, 0),)
        np.testing.assert_array_equal(bank.kernels, np.ones((1, 1, 1, 1)))

    def test_each_kernel_is_unit_impulse(self):
        for size in (1, 3, 5):
            bank = make_bank(size)
            for d in range(bank.count):
                k = bank.kernels[d, 0]
                assert k.sum() == 1.0 and (k >= 0).all() and (k == 1).sum() == 1

    def test_even_size_rejected(self):
        with pytest.raises(ShapeError):
            make_bank(4)

    def test_duplicate_offsets_rejected(self):
        with pytest.raises(ShapeError):
            make_bank(3, subset=[(0, 0), (1, 0), (1, 0)])

    def test_out_of_range_offset_rejected(self):
        with pytest.raises(ShapeError):
            make_bank(3, subset=[(0, 0), (2, 0)])

    def test_offsets_map_to_kernel_positions(self):
        bank = make_bank(3)
        for d, (dx, dy) in enumerate(bank.offsets):
            assert bank.kernels[d, 0, dy + 1, dx + 1] == 1.0


class TestPropagateSpatial:
    def test_identity_candidate_bit_equals_input(self, rng):
        seg = random_seg(rng)
        stack = propagate_spatial(seg, make_bank(3))
        assert stack.offsets[0] == (0, 0)
        assert stack.candidate(0).tobytes() == seg.data.tobytes()

    def test_offset_shift_matches_conv_oracle(self, rng):
        seg = random_seg(rng)
        bank = make_bank(3)
        stack = propagate_spatial(seg, bank)
        oracle = conv_shift_oracle(seg.data, bank)
        assert stack.stack.tobytes() == oracle.tobytes()

    def test_k5_matches_conv_oracle(self, rng):
        seg = random_seg(rng, h=8, w=8)
        bank = make_bank(5)
        stack = propagate_spatial(seg, bank)
        oracle = conv_shift_oracle(seg.data, bank)
        assert stack.stack.tobytes() == oracle.tobytes()

    def test_index_oracle_all_pixels(self, rng):
        seg = random_seg(rng, c=2, h=5, w=6)
        bank = make_bank(3)
        stack = propagate_spatial(seg, bank)
        h, w = 5, 6
        for d, (dx, dy) in enumerate(bank.offsets):
            for y in range(h):
                for x in range(w):
                    sy = min(max(y + dy, 0), h - 1)
                    sx = min(max(x + dx, 0), w - 1)
                    np.testing.assert_array_equal(stack.stack[d, :, y, x],
                                                  seg.data[:, sy, sx])

    def test_full_bank_sum_is_box_sum_interior(self, rng):
        seg = random_seg(rng, c=2, h=6, w=6)
        stack = propagate_spatial(seg, make_bank(3))
        total = stack.stack.sum(axis=0)
        for y in range(1, 5):
            for x in range(1, 5):
                box = seg.data[:, y - 1:y + 2, x - 1:x + 2].sum(axis=(1, 2))
                np.testing.assert_allclose(total[:, y, x], box, atol=1e-12)

    def test_learnable_init_matches_fast_path(self, rng):
        seg = random_seg(rng)
        fast = propagate_spatial(seg, make_bank(3, learnable=False))
        slow = propagate_spatial(seg, make_bank(3, learnable=True))
        assert fast.stack.tobytes() == slow.stack.tobytes()

    def test_too_small_input_rejected(self, rng):
        seg = SegTensor(Tensor.full(1, 2, 2, 0.5), semantics="logits")
        with pytest.raises(ShapeError):
            propagate_spatial(seg, make_bank(5))


def test_default_offsets_row_major_with_identity_first():
    offs = default_offsets(3)
    assert offs[0] == (0, 0)
    ordered_rest = sorted(((dy, dx) for dx, dy in offs[1:]))
    assert [(dx, dy) for dy, dx in ordered_rest] == list(offs[1:])
