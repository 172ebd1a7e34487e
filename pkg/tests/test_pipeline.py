"""Pipeline scheduling, propagation invariants, and timing bookkeeping."""

import numpy as np
import pytest

from vidseg import ShapeError, Tensor
from vidseg.config import PipelineConfig, SyntheticConfig
from vidseg.errors import StateError
from vidseg.pipeline import (
    Models,
    OracleSegmenter,
    ToySegmenter,
    cast_models,
    downsample_labels,
    gt_oracle,
    init_models,
    init_toy_params,
    run_sequence,
    step,
    upsample_to_full,
)
from vidseg.synthetic import aligned_static_snippet, make_snippets
from vidseg.warp import SegTensor, labels_to_probs


def small_config(**kw):
    defaults = dict(class_count=4, frame_height=48, frame_width=48,
                    keyframe_interval=5, flow_width=8, intra_width=8,
                    guide_width=8, toy_width=8)
    defaults.update(kw)
    return PipelineConfig(**defaults)


def snippet_frames(snippet, dtype=np.float64):
    return [Tensor.wrap(f.astype(dtype)) for f in snippet.frames]


class CountingSegmenter:
    """Wraps a segmenter and records which frame indices it served."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def segment(self, frame, frame_index=None):
        self.calls.append(frame_index)
        return self.inner.segment(frame, frame_index)


@pytest.fixture
def moving_setup():
    cfg = small_config()
    syn = SyntheticConfig(height=48, width=48, class_count=4, shape_count_min=3,
                          shape_count_max=3, speed_max=3.0, size_min=5, size_max=10,
                          frames_per_scene=12)
    snippet = make_snippets(syn, count=1, seed=5)[0]
    models = init_models(cfg, seed=3)
    oracle = gt_oracle(list(snippet.labels), cfg.class_count)
    return cfg, snippet, models, oracle


class TestScheduling:
    def test_interval_one_output_equals_segmenter(self, rng):
        cfg = small_config(keyframe_interval=1)
        raw = rng.uniform(0.1, 1.0, size=(5, 4, 6, 6))
        maps = [SegTensor(Tensor.wrap(r / r.sum(axis=0))) for r in raw]
        oracle = OracleSegmenter(lambda i: maps[i])
        models = init_models(cfg, seed=0)
        frames = [Tensor.wrap(rng.random((3, 48, 48))) for _ in range(5)]
        outs = [seg for seg, _ in run_sequence(frames, cfg, models, oracle)]
        for seg, expected in zip(outs, maps):
            assert seg.data.tobytes() == expected.data.tobytes()

    def test_segmenter_invoked_at_keyframes_only(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        counting = CountingSegmenter(oracle)
        frames = snippet_frames(snippet)[:10]
        list(run_sequence(frames, cfg, models, counting))
        assert counting.calls == [0, 5]

    def test_keyframe_reset_independent_of_history(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        frames = snippet_frames(snippet)[:10]
        full = [seg for seg, _ in run_sequence(frames, cfg, models, oracle)]
        tail = [seg for seg, _ in run_sequence(frames[5:], cfg, models, oracle,
                                               start_index=5)]
        for a, b in zip(full[5:], tail):
            assert a.data.tobytes() == b.data.tobytes()

    def test_oracle_requires_index(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        with pytest.raises(StateError):
            oracle.segment(snippet_frames(snippet)[0], None)


class TestPropagation:
    def test_static_identity_chain(self):
        # static video + zero-initialized flow head + guidance forced to the
        # identity slot reproduces the keyframe bit-exactly at every step
        cfg = small_config(keyframe_interval=100, guidance_override="identity")
        snip = aligned_static_snippet(48, 48, 4, frame_count=21)
        models = init_models(cfg, seed=1)
        oracle = gt_oracle(list(snip.labels), 4)
        outs = [seg for seg, _ in run_sequence(snippet_frames(snip), cfg, models, oracle)]
        first = outs[0].data.tobytes()
        assert all(seg.data.tobytes() == first for seg in outs)

    def test_probability_preservation(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        for seg, _ in run_sequence(snippet_frames(snippet), cfg, models, oracle):
            assert seg.is_probs
            np.testing.assert_allclose(seg.data.sum(axis=0), 1.0, atol=1e-5)
            assert seg.data.min() >= 0

    def test_deterministic_stream(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        frames = snippet_frames(snippet)
        a = [seg.data.tobytes() for seg, _ in run_sequence(frames, cfg, models, oracle)]
        b = [seg.data.tobytes() for seg, _ in run_sequence(frames, cfg, models, oracle)]
        assert a == b

    def test_warp_only_mode(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        cfg_w = small_config(propagation="warp_only")
        outs = [seg for seg, _ in run_sequence(snippet_frames(snippet)[:6],
                                               cfg_w, models, oracle)]
        assert len(outs) == 6
        for seg in outs:
            np.testing.assert_allclose(seg.data.sum(axis=0), 1.0, atol=1e-5)

    def test_float32_inference(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        cfg32 = small_config(dtype="float32")
        oracle32 = gt_oracle(list(snippet.labels), 4, dtype=np.float32)
        outs = [seg for seg, _ in run_sequence(snippet_frames(snippet)[:6],
                                               cfg32, models, oracle32)]
        assert all(seg.data.dtype == np.float32 for seg in outs)

    def test_wrong_frame_shape_rejected(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        with pytest.raises(ShapeError):
            step(None, Tensor.zeros(3, 40, 40), cfg, models, oracle)

    def test_streaming_is_lazy(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        pulled = []

        def source():
            for i, f in enumerate(snippet_frames(snippet)):
                pulled.append(i)
                yield f

        stream = run_sequence(source(), cfg, models, oracle)
        for _ in range(3):
            next(stream)
        assert len(pulled) <= 4


class TestTimings:
    def test_nonkey_has_four_nonzero_stages(self, moving_setup):
        cfg, snippet, models, oracle = moving_setup
        results = list(run_sequence(snippet_frames(snippet)[:6], cfg, models, oracle))
        key_times = results[0][1]
        assert key_times.kind == "key"
        assert key_times.total_us > 0
        assert key_times.stage_sum_us == 0
        for _, times in results[1:5]:
            assert times.kind == "nonkey"
            for v in (times.flow_us, times.warp_us, times.feat_us, times.fuse_us):
                assert v > 0

    def test_stage_sum_close_to_total(self, moving_setup):
        cfg, snippet, models, _ = moving_setup
        frames = snippet_frames(snippet)
        # 100 steps by cycling the snippet; oracle indexes modulo its length
        labels = list(snippet.labels)
        oracle = gt_oracle(labels * 10, cfg.class_count)
        long_frames = [frames[i % len(frames)] for i in range(100)]
        totals = 0
        stage_sums = 0
        for _, times in run_sequence(long_frames, cfg, models, oracle):
            if times.kind == "nonkey":
                totals += times.total_us
                stage_sums += times.stage_sum_us
        assert stage_sums <= totals
        assert stage_sums >= 0.95 * totals


class TestHelpers:
    def test_downsample_labels_block_center(self):
        labels = np.arange(16 * 16).reshape(16, 16)
        small = downsample_labels(labels, 8)
        assert small.shape == (2, 2)
        assert small[0, 0] == labels[4, 4]
        assert small[1, 1] == labels[12, 12]

    def test_upsample_constant(self):
        seg = SegTensor(Tensor.wrap(np.stack([np.full((4, 4), 0.8),
                                              np.full((4, 4), 0.2)])))
        out = upsample_to_full(seg, 32, 32)
        np.testing.assert_array_equal(out, 0)
        assert out.shape == (32, 32)

    def test_upsample_one_hot_matches_direct_bilinear_oracle(self, rng):
        labels = rng.integers(0, 3, size=(4, 4))
        seg = labels_to_probs(labels, 3)
        out = upsample_to_full(seg, 32, 32)

        # independent per-pixel bilinear evaluation, then argmax
        def sample(channel, y, x):
            sy = (y + 0.5) / 8.0 - 0.5
            sx = (x + 0.5) / 8.0 - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            acc = 0.0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy = min(max(y0 + dy, 0), 3)
                    xx = min(max(x0 + dx, 0), 3)
                    acc += wy * wx * seg.data[channel, yy, xx]
            return acc

        oracle = np.zeros((3, 32, 32))
        for ch in range(3):
            for y in range(32):
                for x in range(32):
                    oracle[ch, y, x] = sample(ch, y, x)
        np.testing.assert_array_equal(out, oracle.argmax(axis=0))

        # away from class boundaries the result is pure block expansion
        expansion = np.kron(labels, np.ones((8, 8), dtype=np.int64))
        interior = np.ones((4, 4), dtype=bool)
        interior[:-1] &= labels[:-1] == labels[1:]
        interior[1:] &= labels[:-1] == labels[1:]
        interior[:, :-1] &= labels[:, :-1] == labels[:, 1:]
        interior[:, 1:] &= labels[:, :-1] == labels[:, 1:]
        mask = np.kron(interior, np.ones((8, 8), dtype=bool))
        np.testing.assert_array_equal(out[mask], expansion[mask])

    def test_upsample_rejects_non_8x_target(self, rng):
        seg = labels_to_probs(rng.integers(0, 2, size=(4, 4)), 2)
        with pytest.raises(ShapeError):
            upsample_to_full(seg, 30, 32)

    def test_toy_segmenter_contract(self, rng):
        params = init_toy_params(rng, class_count=4, width=8)
        seg = ToySegmenter(params).segment(Tensor.wrap(rng.random((3, 48, 48))))
        assert seg.data.shape == (4, 6, 6)
        assert seg.is_probs

    def test_cast_models_roundtrip(self, moving_setup):
        cfg, _, models, _ = moving_setup
        m32 = cast_models(models, np.float32)
        assert m32.flow.head.kernel.dtype == np.float32
        assert m32.bank.kernels.dtype == np.float32
        assert cast_models(m32, np.float32) is m32

    def test_parameters_have_decay_tags(self, moving_setup):
        cfg, _, models, _ = moving_setup
        params = {p.name: p for p in models.parameters()}
        assert params["guide.edge_scale"].decay is False
        assert params["flow.stem0.bias"].decay is False
        assert params["flow.stem0.weight"].decay is True
        assert "bank.kernels" not in params  # default bank is not learnable
