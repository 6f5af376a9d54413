"""Masked-autoencoder pretraining: mask plans, the lightweight decoder,
reconstruction targets/loss and the four reconstruction panels."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .model import (EncoderOutput, TokenSequence, add_embeddings, block_forward, embed_video,
                    encoder_forward, linear, patchify, prepend_class_token, token_grid, unpatchify)
from .tensor import Tensor
from .video import VideoClip, denormalize_pixels, equally_spaced_indices


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    keep_ids: np.ndarray
    mask_ids: np.ndarray
    restore_perm: np.ndarray
    ratio: float
    seed: int

    @property
    def shuffle(self) -> np.ndarray:
        return np.concatenate([self.keep_ids, self.mask_ids])


def visible_count(n_tokens: int, ratio: float) -> int:
    """max(1, round(n * (1 - ratio))), halves rounded up."""
    return max(1, int(math.floor(n_tokens * (1.0 - ratio) + 0.5)))


def make_mask_plan(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_tokens < 1:
        raise ConfigError(f"need at least one token, got {n_tokens}")
    perm = np.random.default_rng(seed).permutation(n_tokens)
    k = visible_count(n_tokens, ratio)
    return MaskPlan(n_tokens, perm[:k].copy(), perm[k:].copy(), np.argsort(perm), ratio, int(seed))


def clip_seed(global_seed: int, *indices: int) -> int:
    """Stable per-clip seed derived from the run seed and clip/epoch indices."""
    return int(np.random.SeedSequence([global_seed, *indices]).generate_state(1)[0])


def apply_mask(seq: TokenSequence, plan: MaskPlan) -> TokenSequence:
    """Keep only the visible rows, in shuffled order. A class token row stays in front."""
    offset = int(seq.has_class_token)
    if seq.n_tokens - offset != plan.n_tokens:
        raise ContractError(f"mask plan covers {plan.n_tokens} tokens but the sequence has "
                            f"{seq.n_tokens - offset}")
    rows = plan.keep_ids + offset
    if offset:
        rows = np.concatenate([[0], rows])
    return TokenSequence(T.gather_rows(seq.tokens, rows), seq.grid, seq.has_class_token)


def decoder_forward(latent: EncoderOutput | Tensor, plan: MaskPlan, params, cfg: ModelConfig) -> Tensor:
    """Reconstruct every token's tubelet pixels from the visible latents plus mask tokens."""
    if isinstance(latent, EncoderOutput):
        x, has_cls = latent.latent, latent.has_class_token
    else:
        x, has_cls = latent, False
    if has_cls:
        x = T.gather_rows(x, np.arange(1, x.shape[0]))
    if x.shape[0] != len(plan.keep_ids):
        raise ContractError(f"decoder got {x.shape[0]} visible rows, plan keeps {len(plan.keep_ids)}")
    t, h, w, n = token_grid(cfg)
    if plan.n_tokens != n:
        raise ContractError(f"mask plan covers {plan.n_tokens} tokens, config grid has {n}")
    x = T.layer_norm(x, params["dec.in_norm.weight"], params["dec.in_norm.bias"])
    x = linear(x, params, "dec.embed")
    if len(plan.mask_ids):
        masks = T.gather_rows(params["dec.mask_token"], np.zeros(len(plan.mask_ids), dtype=np.int64))
        x = T.concat([x, masks], axis=0)
    x = T.gather_rows(x, plan.restore_perm)
    seq = add_embeddings(TokenSequence(x, (t, h, w)), params["dec.pos_embed.spatial"],
                         params["dec.pos_embed.temporal"])
    x = seq.tokens
    for i in range(cfg.decoder_depth):
        x = block_forward(x, params, f"dec.block{i}", cfg.decoder_heads)
    x = T.layer_norm(x, params["dec.norm.weight"], params["dec.norm.bias"])
    return linear(x, params, "dec.pred")


# --------------------------------------------------------------------------
# targets and loss


@dataclass(frozen=True)
class ReconTarget:
    values: np.ndarray       # (n_tokens, tubelet_dim), zero outside target frames
    coord_mask: np.ndarray   # bool, True where the coordinate belongs to a target frame
    frame_ids: np.ndarray
    mean: np.ndarray         # per-token stats used for (un)normalisation
    std: np.ndarray
    constant: np.ndarray     # tokens whose target pixels have zero spread
    norm: str


def target_frame_ids(cfg: ModelConfig) -> np.ndarray:
    if cfg.recon_frames < 1:
        raise ConfigError("recon_frames must be >= 1")
    if cfg.recon_frames > cfg.num_frames:
        raise ConfigError(f"recon_frames={cfg.recon_frames} exceeds num_frames={cfg.num_frames}")
    return equally_spaced_indices(cfg.num_frames, cfg.recon_frames)


def coordinate_frames(cfg: ModelConfig) -> np.ndarray:
    """Absolute frame index of every (token, coordinate) pair."""
    t, h, w, n = token_grid(cfg)
    p2 = cfg.patch_size ** 2
    tau = np.arange(n) // (h * w)
    dt = np.arange(cfg.tubelet_depth * p2) // p2
    return tau[:, None] * cfg.tubelet_depth + dt[None, :]


def build_recon_target(video, cfg: ModelConfig, eps: float = 1e-6) -> ReconTarget:
    data = video.data if isinstance(video, Tensor) else np.asarray(video)
    tokens = patchify(data.astype(np.float64), cfg)
    frame_ids = target_frame_ids(cfg)
    coord_mask = np.isin(coordinate_frames(cfg), frame_ids)
    n = tokens.shape[0]
    if cfg.target_norm == "raw":
        mean, std, constant = np.zeros(n), np.ones(n), np.zeros(n, dtype=bool)
        values = tokens
    else:
        # stats over the target coordinates, or the whole tubelet when it has none
        has_target = coord_mask.any(axis=1, keepdims=True)
        weight = np.where(has_target, coord_mask, True).astype(np.float64)
        count = weight.sum(axis=1)
        mean = (tokens * weight).sum(axis=1) / count
        var = (((tokens - mean[:, None]) ** 2) * weight).sum(axis=1) / count
        std = np.sqrt(var)
        constant = std < eps
        std = np.where(constant, 0.0, std)
        values = np.where(constant[:, None], 0.0, (tokens - mean[:, None]) / np.where(constant, 1.0, std)[:, None])
    values = np.where(coord_mask, values, 0.0).astype(np.float32)
    return ReconTarget(values, coord_mask, frame_ids, mean, std, constant, cfg.target_norm)


def reconstruction_loss(pred: Tensor, target: ReconTarget, plan: MaskPlan) -> Tensor:
    """Mean squared error over masked tokens, restricted to target-frame coordinates."""
    if pred.shape != target.values.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.values.shape}")
    if len(plan.mask_ids) == 0:
        raise ContractError("mask plan hides no tokens; reconstruction loss is undefined")
    rows = plan.mask_ids
    weight = target.coord_mask[rows].astype(pred.dtype)
    count = float(weight.sum())
    if count == 0:
        raise ContractError("no target-frame coordinates among the masked tokens")
    diff = T.sub(T.gather_rows(pred, rows), Tensor(target.values[rows], dtype=pred.dtype))
    sq = T.mul(T.mul(diff, diff), Tensor(weight, dtype=pred.dtype))
    return T.scale(T.tsum(sq), 1.0 / count)


def mae_forward(video: Tensor, params, cfg: ModelConfig, plan: MaskPlan) -> Tensor:
    seq = apply_mask(embed_video(video, cfg, params), plan)
    if cfg.use_class_token:
        seq = prepend_class_token(seq, params)
    return decoder_forward(encoder_forward(seq, params, cfg), plan, params, cfg)


def mae_loss(video: Tensor, params, cfg: ModelConfig, plan: MaskPlan,
             target: ReconTarget | None = None) -> Tensor:
    if target is None:
        target = build_recon_target(video, cfg)
    return reconstruction_loss(mae_forward(video, params, cfg, plan), target, plan)


# --------------------------------------------------------------------------
# panels

PANELS = ("original", "masked", "recon", "recon_visible")


def unnormalize_tokens(pred: np.ndarray, target: ReconTarget) -> np.ndarray:
    if target.norm == "raw":
        return pred
    return pred * target.std[:, None] + target.mean[:, None]


def render_reconstruction(video, pred, plan: MaskPlan, cfg: ModelConfig, mode: str,
                          fps: float | None = None) -> VideoClip:
    """Render one panel over all sampled frames; ``mode`` is one of ``PANELS``."""
    if mode not in PANELS:
        raise ConfigError(f"unknown panel {mode!r}; choose from {PANELS}")
    data = video.data if isinstance(video, Tensor) else np.asarray(video)
    fps = fps or cfg.target_fps
    original = denormalize_pixels(data, cfg.norm_mean, cfg.norm_std)
    if mode == "original":
        return VideoClip(original, fps)
    orig_tokens = patchify(original, cfg)
    if mode == "masked":
        out = orig_tokens.copy()
        out[plan.mask_ids] = 0
        return VideoClip(unpatchify(out, cfg), fps)
    target = build_recon_target(data, cfg)
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    recon = denormalize_pixels(unnormalize_tokens(pred.astype(np.float64), target), cfg.norm_mean, cfg.norm_std)
    if mode == "recon_visible":
        recon[plan.keep_ids] = orig_tokens[plan.keep_ids]
    return VideoClip(unpatchify(recon, cfg), fps)


def write_pgm(path, frame: np.ndarray) -> None:
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    h, w = frame.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + frame.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    body = raw[m.end():]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_panels(video, pred, plan: MaskPlan, cfg: ModelConfig, out_dir, stem: str) -> list[Path]:
    """Write all four panels for the reconstructed frames as ``{stem}.{panel}.{frame:03}.pgm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = target_frame_ids(cfg)
    written = []
    for panel in PANELS:
        clip = render_reconstruction(video, pred, plan, cfg, panel)
        for f in frames:
            path = out_dir / f"{stem}.{panel}.{int(f):03d}.pgm"
            write_pgm(path, clip.pixels[f])
            written.append(path)
    return written
