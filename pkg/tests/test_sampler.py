import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbvqa.errors import BadConfig, DecodeError, EmptyVideo, FrameTooSmall, PlanMismatch
from sbvqa.sampler import (
    IngestionPolicy,
    VideoTensor,
    decode_file,
    fragment_from_video,
    ingest_video,
    normalize_frames,
    plan_fragment,
    register_decoder,
    sample_fragment,
)


def coord_video(t, h, w):
    """Every pixel stores its own (t, y, x)."""
    tt, yy, xx = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return VideoTensor(np.stack([tt, yy, xx], axis=-1).astype(np.int32))


def check_provenance(video, plan, frag):
    g, p = plan.grid_count, plan.patch_size
    _, h, w = plan.dims
    ch, cw = h // g, w // g
    idx = np.asarray(plan.temporal_indices)
    for gy in range(g):
        for gx in range(g):
            tile = frag.tensor[:, gy * p:(gy + 1) * p, gx * p:(gx + 1) * p]
            dy, dx = plan.offsets[gy][gx]
            assert 0 <= dy <= ch - p and 0 <= dx <= cw - p
            y0, x0 = gy * ch + dy, gx * cw + dx
            np.testing.assert_array_equal(tile[..., 0], np.broadcast_to(idx[:, None, None], (len(idx), p, p)))
            np.testing.assert_array_equal(tile[..., 1], np.broadcast_to(np.arange(y0, y0 + p)[None, :, None], tile.shape[:3]))
            np.testing.assert_array_equal(tile[..., 2], np.broadcast_to(np.arange(x0, x0 + p)[None, None, :], tile.shape[:3]))


def test_train_tiles_come_from_planned_windows():
    video = coord_video(12, 50, 61)
    plan = plan_fragment(video.dims, 3, 8, 6, mode="train", seed=7)
    check_provenance(video, plan, sample_fragment(video, plan))


def test_eval_plan_is_centred_and_seed_free():
    plan = plan_fragment((16, 100, 100), 4, 16, 8, mode="eval", seed=123)
    # cells are 25 px, slack 9 -> offset 4 everywhere
    assert {o for row in plan.offsets for o in row} == {(4, 4)}
    assert plan.seed is None
    assert plan == plan_fragment((16, 100, 100), 4, 16, 8, mode="eval", seed=5)
    # stride 2, phase 1
    assert plan.temporal_indices == (1, 3, 5, 7, 9, 11, 13, 15)


def test_train_plan_depends_on_seed_only():
    a = plan_fragment((16, 90, 90), 3, 20, 8, "train", seed=1)
    assert a == plan_fragment((16, 90, 90), 3, 20, 8, "train", seed=1)
    assert a != plan_fragment((16, 90, 90), 3, 20, 8, "train", seed=2)


def test_temporal_indices_in_range():
    for seed in range(20):
        plan = plan_fragment((10, 32, 32), 2, 16, 4, "train", seed)
        idx = np.array(plan.temporal_indices)
        assert idx.min() >= 0 and idx.max() < 10
        assert np.all(np.diff(idx) > 0)


def test_errors():
    with pytest.raises(FrameTooSmall):
        plan_fragment((4, 60, 100), 2, 32, 2)
    with pytest.raises(BadConfig):
        plan_fragment((4, 64, 64), 2, 32, 2, mode="test")
    with pytest.raises(BadConfig):
        plan_fragment((4, 64, 64), 0, 32, 2)
    with pytest.raises(BadConfig):
        plan_fragment((4, 64, 64), 2, 32, 5)
    plan = plan_fragment((4, 64, 64), 2, 32, 2)
    with pytest.raises(PlanMismatch):
        sample_fragment(coord_video(4, 64, 65), plan)


def test_short_clip_is_looped():
    video = coord_video(3, 32, 32)
    frag = fragment_from_video(video, 2, 16, 7)
    assert frag.tensor.shape == (7, 32, 32, 3)
    assert set(frag.tensor[:, 0, 0, 0].tolist()) <= {0, 1, 2}


@settings(max_examples=40, deadline=None)
@given(
    g=st.integers(1, 4), p=st.integers(1, 12), extra_h=st.integers(0, 20), extra_w=st.integers(0, 20),
    t=st.integers(1, 12), seed=st.integers(0, 2 ** 31 - 1), data=st.data(),
)
def test_provenance_property(g, p, extra_h, extra_w, t, seed, data):
    tf = data.draw(st.integers(1, t))
    video = coord_video(t, g * p + extra_h, g * p + extra_w)
    mode = data.draw(st.sampled_from(["train", "eval"]))
    plan = plan_fragment(video.dims, g, p, tf, mode, seed)
    frag = sample_fragment(video, plan)
    assert frag.tensor.shape == (tf, g * p, g * p, 3)
    check_provenance(video, plan, frag)


# ---------------------------------------------------------------- ingestion


def test_normalize_frames_channels_and_scale():
    gray = np.full((2, 10, 20), 255, dtype=np.uint8)
    out = normalize_frames(gray, min_side=10)
    assert out.shape == (2, 10, 20, 3) and out.dtype == np.float32
    assert np.all(out == 1.0)
    rgba = np.zeros((1, 8, 8, 4), dtype=np.uint8)
    assert normalize_frames(rgba, 8).shape == (1, 8, 8, 3)


def test_normalize_frames_upscales_short_side():
    out = normalize_frames(np.random.default_rng(0).random((2, 30, 45, 3)), min_side=60)
    assert min(out.shape[1:3]) >= 60
    assert out.shape[2] >= 90


def test_normalize_frames_rejects_empty():
    with pytest.raises(EmptyVideo):
        normalize_frames(np.zeros((0, 8, 8, 3)), 8)


def test_decode_errors(tmp_path):
    with pytest.raises(DecodeError):
        decode_file(tmp_path / "missing.npy")
    bad = tmp_path / "bad.mp4"
    bad.write_bytes(b"not a video")
    with pytest.raises(DecodeError):
        decode_file(bad)


def test_ingest_npz_with_frame_rate(tmp_path):
    frames = np.random.default_rng(1).integers(0, 255, (5, 16, 16, 3), dtype=np.uint8)
    np.savez(tmp_path / "v.npz", frames=frames, frame_rate=12.5)
    v = ingest_video(tmp_path / "v.npz", IngestionPolicy(min_side=16))
    assert v.frame_rate == 12.5
    np.testing.assert_allclose(v.frames, frames / 255.0, atol=1e-7)


def test_ingest_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SBVQA_CACHE", str(tmp_path / "cache"))
    frames = np.random.default_rng(2).integers(0, 255, (3, 8, 8, 3), dtype=np.uint8)
    np.save(tmp_path / "v.npy", frames)
    policy = IngestionPolicy(min_side=16)
    first = ingest_video(tmp_path / "v.npy", policy)
    assert len(list((tmp_path / "cache").glob("*.npz"))) == 1
    second = ingest_video(tmp_path / "v.npy", policy)
    np.testing.assert_array_equal(first.frames, second.frames)


def test_register_decoder(tmp_path):
    calls = []

    def fake(path):
        calls.append(path)
        return np.zeros((2, 4, 4, 3), dtype=np.uint8), 30.0

    register_decoder(".fake", fake)
    (tmp_path / "a.fake").write_text("x")
    v = ingest_video(tmp_path / "a.fake", IngestionPolicy(min_side=4))
    assert calls and v.frame_rate == 30.0


def test_video_tensor_validation():
    with pytest.raises(BadConfig):
        VideoTensor(np.zeros((2, 4, 4)))
    v = VideoTensor(np.zeros((8, 4, 4, 3)), frame_rate=4)
    assert v.duration == 2.0
