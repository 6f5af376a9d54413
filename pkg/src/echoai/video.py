"""Video containers, preprocessing and the synthetic pulsating-ventricle corpus."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, InsufficientFramesError, ValidationError
from .tensor import Tensor

EAIV_MAGIC = b"EAIV"
EAIV_VERSION = 1
_EAIV_HEADER = struct.Struct("<4s6I")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class VideoClip:
    """Grayscale video as a (frames, height, width) uint8 array plus its frame rate."""

    pixels: np.ndarray
    fps: float

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or min(px.shape) < 1:
            raise FormatError(f"clip pixels must be a non-empty (frames, h, w) array, got {px.shape}")
        if not self.fps > 0:
            raise FormatError(f"fps must be positive, got {self.fps}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    channels = 1

    def __eq__(self, other):
        return (isinstance(other, VideoClip) and self.fps == other.fps
                and self.pixels.shape == other.pixels.shape
                and bool(np.array_equal(self.pixels, other.pixels)))


# --------------------------------------------------------------------------
# EAIV container


def save_raw_video(clip: VideoClip, path) -> None:
    header = _EAIV_HEADER.pack(EAIV_MAGIC, EAIV_VERSION, clip.frames, clip.height, clip.width, 1,
                               int(round(clip.fps * 1000)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(clip.pixels.tobytes())


def load_raw_video(path) -> VideoClip:
    raw = Path(path).read_bytes()
    if len(raw) < _EAIV_HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, frames, height, width, channels, fps_millis = _EAIV_HEADER.unpack_from(raw)
    if magic != EAIV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EAIV_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    for name, value in (("frames", frames), ("height", height), ("width", width),
                        ("channels", channels), ("fps_millis", fps_millis)):
        if value == 0:
            raise FormatError(f"{path}: field {name} is zero")
    expected = frames * height * width * channels
    payload = raw[_EAIV_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload truncated, header promises {frames} frames "
                          f"({expected} bytes) but only {len(payload)} bytes follow")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(frames, height, width, channels)
    if channels == 1:
        px = px[..., 0]
    else:
        weights = LUMA if channels == 3 else np.full(channels, 1.0 / channels)
        px = np.clip(np.floor(px[..., :len(weights)] @ weights + 0.5), 0, 255).astype(np.uint8)
    return VideoClip(px, fps_millis / 1000.0)


# --------------------------------------------------------------------------
# preprocessing


def _round_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(clip: VideoClip, out_h: int, out_w: int) -> VideoClip:
    """Per-frame bilinear resize with half-pixel centre alignment."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (clip.height, clip.width):
        return clip
    y0, y1, fy = _bilinear_axis(clip.height, out_h)
    x0, x1, fx = _bilinear_axis(clip.width, out_w)
    px = clip.pixels.astype(np.float64)
    rows = px[:, y0, :] * (1 - fy)[None, :, None] + px[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return VideoClip(_round_u8(out), clip.fps)


def standardize_fps(clip: VideoClip, target_fps: float) -> VideoClip:
    """Nearest-frame temporal resampling; ties go to the earlier frame."""
    if not target_fps > 0:
        raise ConfigError(f"target_fps must be positive, got {target_fps}")
    if target_fps == clip.fps:
        return clip
    n_out = max(1, int(math.floor(clip.frames * target_fps / clip.fps + 0.5)))
    src = np.arange(n_out) * (clip.fps / target_fps)
    idx = np.ceil(src - 0.5 - 1e-9).astype(np.int64)
    idx = np.clip(idx, 0, clip.frames - 1)
    return VideoClip(clip.pixels[idx], target_fps)


@dataclass(frozen=True)
class SamplingSpec:
    num_frames: int
    mode: str = "rate"  # "rate" | "equally_spaced"
    rate: int = 1
    target_fps: float = 50.0

    def __post_init__(self):
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if self.mode not in ("rate", "equally_spaced"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "rate" and self.rate < 1:
            raise ConfigError("sampling rate must be >= 1")

    @property
    def window(self) -> int:
        """Frames spanned by a rate-based sample."""
        return (self.num_frames - 1) * self.rate + 1


def equally_spaced_indices(total: int, count: int) -> np.ndarray:
    """round(i * (total - 1) / (count - 1)) with halves rounded up."""
    if count == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(count)
    return np.floor(i * (total - 1) / (count - 1) + 0.5).astype(np.int64)


def sample_frames(clip: VideoClip, spec: SamplingSpec, start: int = 0) -> VideoClip:
    if spec.mode == "rate":
        last = start + (spec.num_frames - 1) * spec.rate
        if start < 0 or last >= clip.frames:
            raise InsufficientFramesError(
                f"rate-based window needs frames {start}..{last} but the clip has {clip.frames}")
        idx = start + spec.rate * np.arange(spec.num_frames)
    else:
        if clip.frames < spec.num_frames:
            raise InsufficientFramesError(
                f"cannot spread {spec.num_frames} frames over a {clip.frames}-frame clip")
        idx = equally_spaced_indices(clip.frames, spec.num_frames)
    return VideoClip(clip.pixels[idx], clip.fps)


def loop_pad(clip: VideoClip, min_frames: int) -> VideoClip:
    """Wrap the clip around until it has at least ``min_frames`` frames."""
    if clip.frames >= min_frames:
        return clip
    idx = np.arange(min_frames) % clip.frames
    return VideoClip(clip.pixels[idx], clip.fps)


# --------------------------------------------------------------------------
# augmentation

AUGMENTATIONS = ("brightness", "contrast", "gamma", "translate", "rotate")


def translate(clip: VideoClip, dx: int) -> VideoClip:
    """Shift every frame horizontally by ``dx`` pixels, zero-filling the gap."""
    if dx == 0:
        return clip
    out = np.zeros_like(clip.pixels)
    if abs(dx) < clip.width:
        if dx > 0:
            out[:, :, dx:] = clip.pixels[:, :, :-dx]
        else:
            out[:, :, :dx] = clip.pixels[:, :, -dx:]
    return VideoClip(out, clip.fps)


def _apply_augmentation(clip: VideoClip, name: str, u: float) -> VideoClip:
    # u in [-strength, strength]; each op is the identity at u == 0
    if u == 0:
        return clip
    px = clip.pixels.astype(np.float64)
    if name == "brightness":
        out = px + 0.25 * 255 * u
    elif name == "contrast":
        mean = px.mean()
        out = mean + (px - mean) * (1 + 0.5 * u)
    elif name == "gamma":
        out = 255.0 * (px / 255.0) ** math.exp(0.5 * u)
    elif name == "translate":
        return translate(clip, int(round(0.1 * clip.width * u)))
    elif name == "rotate":
        out = np.stack([ndimage.rotate(f, 10.0 * u, reshape=False, order=1, mode="constant", cval=0.0)
                        for f in px])
    else:
        raise ConfigError(f"unknown augmentation {name!r}")
    return VideoClip(_round_u8(out), clip.fps)


def augment(clip: VideoClip, seed: int, strength: float) -> VideoClip:
    """Apply two randomly chosen transforms, identically to every frame."""
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"augmentation strength must lie in [0, 1], got {strength}")
    if strength == 0:
        return clip
    rng = np.random.default_rng(seed)
    names = rng.choice(len(AUGMENTATIONS), size=2, replace=False)
    for k in names:
        clip = _apply_augmentation(clip, AUGMENTATIONS[k], float(rng.uniform(-strength, strength)))
    return clip


def normalize_pixels(clip: VideoClip, mean: float = 0.45, std: float = 0.225) -> Tensor:
    if std == 0:
        raise ConfigError("normalization std must be non-zero")
    return Tensor((clip.pixels.astype(np.float32) / np.float32(255.0) - np.float32(mean)) / np.float32(std))


def denormalize_pixels(x: np.ndarray, mean: float = 0.45, std: float = 0.225) -> np.ndarray:
    return _round_u8((np.asarray(x, dtype=np.float64) * std + mean) * 255.0)


# --------------------------------------------------------------------------
# synthetic pulsating ventricle


@dataclass(frozen=True)
class SyntheticHeartParams:
    """Ellipse radii are fractions of the frame width/height at full dilation."""

    rx: float = 0.3
    ry: float = 0.35
    contraction: float = 0.8
    beats: float = 2.0
    noise: float = 12.0
    speckle_seed: int = 0

    @property
    def ef(self) -> float:
        return 100.0 * (1.0 - self.contraction ** 2)

    def validate(self):
        if not 0 < self.contraction <= 1:
            raise ConfigError(f"contraction must lie in (0, 1], got {self.contraction}")
        if not (0 < self.rx < 0.5 and 0 < self.ry < 0.5):
            raise ConfigError(f"ellipse radii ({self.rx}, {self.ry}) exceed the frame")
        if self.beats <= 0 or self.noise < 0:
            raise ConfigError("beats must be positive and noise non-negative")


def axis_scale(params: SyntheticHeartParams, frames: int) -> np.ndarray:
    """Per-frame axis multiplier: 1 at end-diastole, ``contraction`` at end-systole."""
    phase = 2 * np.pi * params.beats * np.arange(frames) / frames
    c = params.contraction
    return c + (1 - c) * 0.5 * (1 + np.cos(phase))


def generate_synthetic_clip(params: SyntheticHeartParams, frames: int, h: int, w: int, fps: float,
                            seed: int) -> tuple[VideoClip, float]:
    """Render a bright pulsating ellipse over speckle; returns the clip and its analytic EF."""
    params.validate()
    if frames < 1 or h < 1 or w < 1 or not fps > 0:
        raise ConfigError("frames, size and fps must be positive")
    rng = np.random.default_rng([seed, params.speckle_seed])
    speckle = ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.8)
    speckle /= speckle.std() + 1e-12
    yy, xx = np.mgrid[0:h, 0:w]
    dy = (yy + 0.5 - h / 2.0)
    dx = (xx + 0.5 - w / 2.0)
    out = np.empty((frames, h, w))
    for k, s in enumerate(axis_scale(params, frames)):
        a, b = params.rx * w * s, params.ry * h * s
        r = np.sqrt((dx / a) ** 2 + (dy / b) ** 2)
        # approximate signed distance in pixels, one-pixel soft edge
        inside = np.clip(0.5 - (r - 1.0) * math.sqrt(a * b), 0.0, 1.0)
        frame = 40.0 + 150.0 * inside + params.noise * speckle
        frame += 0.5 * params.noise * rng.standard_normal((h, w))
        out[k] = frame
    return VideoClip(_round_u8(out), fps), params.ef


def random_heart_params(rng: np.random.Generator, ef_range=(10.0, 75.0)) -> SyntheticHeartParams:
    ef = rng.uniform(*ef_range)
    return SyntheticHeartParams(
        rx=float(rng.uniform(0.25, 0.38)),
        ry=float(rng.uniform(0.28, 0.42)),
        contraction=float(math.sqrt(1.0 - ef / 100.0)),
        beats=float(rng.choice([1.0, 2.0])),
        noise=float(rng.uniform(4.0, 16.0)),
        speckle_seed=int(rng.integers(2**31)),
    )


# --------------------------------------------------------------------------
# label tables

SPLITS = ("TRAIN", "VAL", "TEST")
LABEL_HEADER = ["FileName", "EF", "Split"]


@dataclass(frozen=True)
class LabelRow:
    file_name: str
    ef: float
    split: str


def write_label_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_HEADER)
        for row in rows:
            writer.writerow([row.file_name, repr(float(row.ef)), row.split])


def load_label_table(path) -> list[LabelRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise ValidationError(f"{path}: header must be exactly {','.join(LABEL_HEADER)}, got {header}")
        rows, problems, seen = [], [], set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                problems.append(f"row {lineno}: expected 3 fields, got {len(rec)}")
                continue
            name, ef_text, split = (field.strip() for field in rec)
            try:
                ef = float(ef_text)
            except ValueError:
                problems.append(f"row {lineno}: EF {ef_text!r} is not a number")
                continue
            if not 0 < ef < 100:
                problems.append(f"row {lineno}: EF {ef} outside (0, 100)")
            if split not in SPLITS:
                problems.append(f"row {lineno}: unknown split {split!r}")
            if name in seen:
                problems.append(f"row {lineno}: duplicate file name {name!r}")
            seen.add(name)
            rows.append(LabelRow(name, ef, split))
    if problems:
        raise ValidationError(f"{path}: " + "; ".join(problems))
    return rows


def resolve_video_path(data_dir, file_name: str) -> Path:
    """EchoNet tables name ``.avi`` files; look for the converted ``.eaiv`` sibling."""
    base = Path(data_dir)
    direct = base / file_name
    if direct.suffix == ".eaiv" and direct.exists():
        return direct
    candidate = base / (Path(file_name).stem + ".eaiv")
    if candidate.exists():
        return candidate
    if direct.exists():
        return direct
    raise ValidationError(f"no video file for {file_name!r} in {base}")


@dataclass(frozen=True)
class SyntheticItem:
    file_name: str
    clip: VideoClip
    ef: float
    split: str
    params: SyntheticHeartParams


def assign_splits(count: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> list[str]:
    """Seeded TRAIN/VAL/TEST assignment; VAL and TEST each get a clip once count >= 3."""
    n_val = int(math.floor(count * fractions[1] + 0.5))
    n_test = int(math.floor(count * fractions[2] + 0.5))
    if count >= 3:
        n_val, n_test = max(1, n_val), max(1, n_test)
    n_train = max(count - n_val - n_test, 0)
    labels = ["TRAIN"] * n_train + ["VAL"] * n_val + ["TEST"] * n_test
    order = np.random.default_rng([seed, 1]).permutation(count)
    out = [""] * count
    for slot, idx in enumerate(order):
        out[idx] = labels[slot]
    return out


def synthetic_corpus(count: int, seed: int, frames: int = 32, size: int = 64, fps: float = 50.0,
                     prefix: str = "synth") -> list[SyntheticItem]:
    rng = np.random.default_rng([seed, 0])
    splits = assign_splits(count, seed)
    items = []
    for i in range(count):
        params = random_heart_params(rng)
        clip, ef = generate_synthetic_clip(params, frames, size, size, fps, seed=int(rng.integers(2**31)))
        items.append(SyntheticItem(f"{prefix}_{i:05d}.eaiv", clip, ef, splits[i], params))
    return items
