import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echoai.errors import ConfigError, FormatError, InsufficientFramesError, ValidationError
from echoai.video import (LabelRow, SamplingSpec, SyntheticHeartParams, VideoClip, assign_splits, augment,
                          axis_scale, denormalize_pixels, generate_synthetic_clip, load_label_table,
                          load_raw_video, loop_pad, normalize_pixels, resize_bilinear, resolve_video_path,
                          sample_frames, save_raw_video, standardize_fps, synthetic_corpus, translate,
                          write_label_table)


def ramp_clip(frames=10, h=6, w=5, fps=50.0):
    return VideoClip((np.arange(frames * h * w) % 256).reshape(frames, h, w), fps)


def frame_tags(clip):
    """Each test frame carries its original index in pixel (0, 0)."""
    return clip.pixels[:, 0, 0].tolist()


def tagged_clip(frames, fps):
    px = np.zeros((frames, 2, 2), dtype=np.uint8)
    px[:, 0, 0] = np.arange(frames)
    return VideoClip(px, fps)


# EAIV container

def test_eaiv_round_trip_is_byte_exact(tmp_path):
    clip = ramp_clip(fps=29.97)
    a, b = tmp_path / "a.eaiv", tmp_path / "b.eaiv"
    save_raw_video(clip, a)
    loaded = load_raw_video(a)
    assert loaded == clip
    save_raw_video(loaded, b)
    assert a.read_bytes() == b.read_bytes()


def test_eaiv_minimal_clip(tmp_path):
    clip = VideoClip(np.full((1, 1, 1), 7), 1.0)
    save_raw_video(clip, tmp_path / "one.eaiv")
    assert load_raw_video(tmp_path / "one.eaiv") == clip


def test_eaiv_truncated_payload(tmp_path):
    path = tmp_path / "t.eaiv"
    save_raw_video(ramp_clip(frames=10), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-6 * 5])  # header says 10 frames, payload holds 9
    with pytest.raises(FormatError, match="truncated"):
        load_raw_video(path)


def test_eaiv_bad_magic_and_zero_field(tmp_path):
    path = tmp_path / "m.eaiv"
    save_raw_video(ramp_clip(), path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_raw_video(path)
    raw[12:16] = (0).to_bytes(4, "little")  # height
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="height"):
        load_raw_video(path)


def test_eaiv_three_channels_collapse_to_luminance(tmp_path):
    import struct
    rgb = np.zeros((1, 1, 2, 3), dtype=np.uint8)
    rgb[0, 0, 0] = (255, 0, 0)
    rgb[0, 0, 1] = (100, 100, 100)
    path = tmp_path / "rgb.eaiv"
    path.write_bytes(struct.pack("<4s6I", b"EAIV", 1, 1, 1, 2, 3, 50000) + rgb.tobytes())
    clip = load_raw_video(path)
    assert clip.pixels[0, 0].tolist() == [76, 100]


# resize

def test_resize_identity_and_constant():
    clip = ramp_clip()
    assert resize_bilinear(clip, clip.height, clip.width) == clip
    const = VideoClip(np.full((2, 5, 7), 93), 30.0)
    assert np.all(resize_bilinear(const, 11, 3).pixels == 93)


def test_resize_checkerboard_matches_opencv():
    board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    ours = resize_bilinear(VideoClip(board[None], 1.0), 4, 4).pixels[0]
    ref = cv2.resize(board, (4, 4), interpolation=cv2.INTER_LINEAR)
    assert np.abs(ours.astype(int) - ref.astype(int)).max() <= 1


def test_resize_checkerboard_midpoint_is_half_grey():
    # at 3x3 the centre sample sits exactly between all four source pixels
    board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    assert resize_bilinear(VideoClip(board[None], 1.0), 3, 3).pixels[0, 1, 1] in (127, 128)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 12), ow=st.integers(1, 12),
       seed=st.integers(0, 999))
def test_resize_agrees_with_opencv(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
    ours = resize_bilinear(VideoClip(img[None], 1.0), oh, ow).pixels[0]
    ref = cv2.resize(img, (ow, oh), interpolation=cv2.INTER_LINEAR)
    # opencv snaps weights to 11-bit fixed point when downsampling; allow one level
    assert np.abs(ours.astype(int) - ref.astype(int)).max() <= 1


# frame rate and sampling

def test_standardize_fps_examples():
    clip = tagged_clip(10, 60.0)
    assert standardize_fps(clip, 60.0) == clip
    assert frame_tags(standardize_fps(clip, 30.0)) == [0, 2, 4, 6, 8]
    up = standardize_fps(tagged_clip(4, 25.0), 50.0)
    assert frame_tags(up) == [0, 0, 1, 1, 2, 2, 3, 3]
    assert up.fps == 50.0


def test_sample_frames_examples():
    clip32 = tagged_clip(32, 50.0)
    assert sample_frames(clip32, SamplingSpec(32, "rate", 1), 0) == clip32
    clip64 = tagged_clip(64, 50.0)
    assert frame_tags(sample_frames(clip64, SamplingSpec(16, "rate", 4), 0)) == list(range(0, 61, 4))
    spread = sample_frames(tagged_clip(29, 50.0), SamplingSpec(8, "equally_spaced"))
    assert frame_tags(spread) == [0, 4, 8, 12, 16, 20, 24, 28]


def test_sample_frames_too_short():
    with pytest.raises(InsufficientFramesError):
        sample_frames(tagged_clip(20, 50.0), SamplingSpec(16, "rate", 4), 0)
    padded = loop_pad(tagged_clip(20, 50.0), SamplingSpec(16, "rate", 4).window)
    assert frame_tags(padded)[18:23] == [18, 19, 0, 1, 2]
    assert sample_frames(padded, SamplingSpec(16, "rate", 4), 0).frames == 16


# augmentation and normalisation

def test_augment_strength_zero_and_determinism():
    clip = ramp_clip()
    assert augment(clip, 5, 0.0) == clip
    assert augment(clip, 5, 0.7) == augment(clip, 5, 0.7)
    assert any(augment(clip, s, 0.7) != clip for s in range(5))
    with pytest.raises(ConfigError):
        augment(clip, 0, 1.5)


def test_translate_round_trip_loses_only_the_border():
    clip = VideoClip(np.random.default_rng(0).integers(1, 256, (3, 8, 12)), 50.0)
    back = translate(translate(clip, 3), -3)
    assert np.array_equal(back.pixels[:, :, :-3], clip.pixels[:, :, :-3])
    assert np.all(back.pixels[:, :, -3:] == 0)


def test_normalize_examples():
    clip = VideoClip(np.array([[[0, 128, 255]]]), 50.0)
    assert normalize_pixels(clip, 0.0, 1.0).data[0, 0, 2] == pytest.approx(1.0)
    assert normalize_pixels(clip, 0.5, 0.5).data[0, 0, 0] == pytest.approx(-1.0)
    assert normalize_pixels(clip).data[0, 0, 1] == pytest.approx((128 / 255 - 0.45) / 0.225, abs=1e-6)
    assert normalize_pixels(clip).data[0, 0, 1] == pytest.approx(0.2310, abs=1e-4)
    with pytest.raises(ConfigError):
        normalize_pixels(clip, 0.5, 0.0)


def test_denormalize_inverts_normalize():
    clip = VideoClip(np.arange(256).reshape(1, 16, 16), 50.0)
    back = denormalize_pixels(normalize_pixels(clip).data)
    assert np.abs(back.astype(int) - clip.pixels.astype(int)).max() <= 1


# synthetic heart

def test_synthetic_ef_formula():
    assert SyntheticHeartParams(contraction=1.0).ef == 0.0
    assert SyntheticHeartParams(contraction=0.8).ef == pytest.approx(36.0)
    with pytest.raises(ConfigError):
        generate_synthetic_clip(SyntheticHeartParams(rx=0.6), 4, 16, 16, 50.0, 0)


@pytest.mark.parametrize("contraction", [0.55, 0.8, 0.95])
def test_pixel_counted_area_matches_analytic_ef(contraction):
    params = SyntheticHeartParams(contraction=contraction, beats=2, noise=0.0)
    clip, ef = generate_synthetic_clip(params, 32, 112, 112, 50.0, seed=3)
    scale = axis_scale(params, 32)
    dia, sys_ = int(np.argmax(scale)), int(np.argmin(scale))
    area = (clip.pixels > 115).sum(axis=(1, 2))
    counted = 100.0 * (1 - area[sys_] / area[dia])
    assert abs(counted - ef) < 2.0


def test_synthetic_clip_is_seeded():
    p = SyntheticHeartParams()
    a, _ = generate_synthetic_clip(p, 4, 32, 32, 50.0, seed=1)
    b, _ = generate_synthetic_clip(p, 4, 32, 32, 50.0, seed=1)
    c, _ = generate_synthetic_clip(p, 4, 32, 32, 50.0, seed=2)
    assert a == b and a != c


def test_synthetic_corpus_labels_follow_generator():
    items = synthetic_corpus(10, seed=4, frames=8, size=24)
    assert len(items) == 10
    for item in items:
        assert item.ef == pytest.approx(100 * (1 - item.params.contraction ** 2))
        assert 0 < item.ef < 100


def test_assign_splits_proportions():
    splits = assign_splits(100, 0)
    assert (splits.count("TRAIN"), splits.count("VAL"), splits.count("TEST")) == (70, 15, 15)
    assert sorted(set(assign_splits(3, 1))) == ["TEST", "TRAIN", "VAL"]


# labels

def test_label_table_round_trip(tmp_path):
    rows = [LabelRow("a.eaiv", 55.9, "TRAIN"), LabelRow("b.eaiv", 12.25, "TEST")]
    write_label_table(rows, tmp_path / "labels.csv")
    assert load_label_table(tmp_path / "labels.csv") == rows


def test_label_table_echonet_row(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("FileName,EF,Split\n0X1A.avi,55.9,TRAIN\n")
    assert load_label_table(path) == [LabelRow("0X1A.avi", 55.9, "TRAIN")]
    (tmp_path / "0X1A.eaiv").write_bytes(b"")
    assert resolve_video_path(tmp_path, "0X1A.avi").name == "0X1A.eaiv"


def test_label_table_errors_list_every_row(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("FileName,EF,Split\na,120,TRAIN\nb,50,HOLDOUT\na,40,VAL\n")
    with pytest.raises(ValidationError) as err:
        load_label_table(path)
    message = str(err.value)
    assert "row 2" in message and "row 3" in message and "row 4" in message and "duplicate" in message
