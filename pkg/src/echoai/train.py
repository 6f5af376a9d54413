"""Optimisation harness: cosine schedule, AdamW, gradient accumulation and
the pretrain / fine-tune loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .errors import InsufficientDataError, ConfigError, NumericError, ValidationError
from .mae import clip_seed, mae_loss, make_mask_plan
from .metrics import EvalPair, compute_report
from .model import ViViT, predict_ef, token_grid
from .tensor import Tensor, no_grad
from .video import (LabelRow, VideoClip, augment, load_raw_video, loop_pad, normalize_pixels,
                    resize_bilinear, resolve_video_path, sample_frames, standardize_fps)

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    total_iterations: int
    lr_min: float = 0.0
    warmup_iterations: int = 0

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")


_clamp_warned = False


def cosine_lr(t: int, cfg: ScheduleConfig) -> float:
    """lr_min + (base - lr_min) * (1 + cos(pi * t / T)) / 2, with optional linear warmup."""
    global _clamp_warned
    if t > cfg.total_iterations:
        if not _clamp_warned:
            log.warning("schedule index %d beyond T=%d; clamping to lr_min", t, cfg.total_iterations)
            _clamp_warned = True
        return cfg.lr_min
    w = cfg.warmup_iterations
    if w and t < w:
        return cfg.base_lr * t / w
    progress = (t - w) / (cfg.total_iterations - w)
    return cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: frozenset = frozenset()
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def no_decay_names(names) -> frozenset:
    """Biases, norm gains and embedding tables are excluded from weight decay."""
    skip = ("bias", "norm", "pos_embed", "cls_token", "mask_token")
    return frozenset(n for n in names if any(s in n for s in skip))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}; step rejected")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and name not in state.no_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class GradAccumulator:
    """Average gradients over ``grad_accum`` micro-batches.

    Each incoming gradient is divided by ``grad_accum`` as it arrives; ``add``
    returns the averaged gradients once the window is complete, else None.
    """

    def __init__(self, grad_accum: int):
        if grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        self.grad_accum = grad_accum
        self.count = 0
        self.buffer: dict[str, np.ndarray] | None = None

    def add(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray] | None:
        scale = 1.0 / self.grad_accum
        if self.buffer is None:
            self.buffer = {k: g * scale for k, g in grads.items()}
        else:
            for k, g in grads.items():
                self.buffer[k] += g * scale
        self.count += 1
        if self.count < self.grad_accum:
            return None
        out, self.buffer, self.count = self.buffer, None, 0
        return out


def accumulate_step(grads: dict[str, np.ndarray], accum: GradAccumulator) -> dict[str, np.ndarray] | None:
    return accum.add(grads)


# --------------------------------------------------------------------------
# data


def preprocess(clip: VideoClip, cfg: ModelConfig, start: int | str = 0, aug_seed: int | None = None,
               aug_strength: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """fps standardisation -> frame sampling -> resize -> augmentation -> normalisation.

    ``start="random"`` draws the rate-based window start from ``rng``.
    """
    spec = cfg.sampling
    clip = standardize_fps(clip, spec.target_fps)
    if spec.mode == "rate":
        clip = loop_pad(clip, spec.window)
        if start == "random":
            start = int(rng.integers(0, clip.frames - spec.window + 1))
    else:
        clip = loop_pad(clip, spec.num_frames)
        start = 0
    clip = sample_frames(clip, spec, int(start))
    clip = resize_bilinear(clip, cfg.image_size, cfg.image_size)
    if aug_strength > 0:
        clip = augment(clip, aug_seed, aug_strength)
    return normalize_pixels(clip, cfg.norm_mean, cfg.norm_std)


class ClipDataset:
    """Labelled clips from a data directory, decoded once and kept in memory."""

    def __init__(self, data_dir, rows: Sequence[LabelRow], cfg: ModelConfig):
        self.data_dir = Path(data_dir)
        self.rows = list(rows)
        self.cfg = cfg
        self._clips: dict[int, VideoClip] = {}

    @classmethod
    def from_clips(cls, clips: Sequence[VideoClip], efs: Sequence[float], cfg: ModelConfig, names=None):
        names = names or [f"clip{i:04d}" for i in range(len(clips))]
        ds = cls(".", [LabelRow(n, float(e), "TRAIN") for n, e in zip(names, efs)], cfg)
        ds._clips = dict(enumerate(clips))
        return ds

    def __len__(self):
        return len(self.rows)

    def clip(self, i: int) -> VideoClip:
        if i not in self._clips:
            self._clips[i] = load_raw_video(resolve_video_path(self.data_dir, self.rows[i].file_name))
        return self._clips[i]

    def label(self, i: int) -> float:
        return self.rows[i].ef

    def train_video(self, i: int, seed: int, strength: float) -> Tensor:
        rng = np.random.default_rng(seed)
        return preprocess(self.clip(i), self.cfg, "random", seed, strength, rng)

    def eval_video(self, i: int) -> Tensor:
        return preprocess(self.clip(i), self.cfg, 0)


def check_labels(data_dir, rows: Sequence[LabelRow]) -> None:
    """Every .eaiv file in ``data_dir`` must have a label row."""
    labelled = {Path(r.file_name).stem for r in rows}
    missing = sorted(p.name for p in Path(data_dir).glob("*.eaiv") if p.stem not in labelled)
    if missing:
        raise ValidationError(f"clips without labels: {', '.join(missing)}")


# --------------------------------------------------------------------------
# loops


@dataclass
class LogRow:
    iteration: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    model: ViViT
    log: list[LogRow]
    optimizer_steps: int
    best_state: dict | None = None
    best_val_mae: float | None = None
    val_history: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.log]


def write_loss_log(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "epoch", "lr", "loss"])
        for r in rows:
            writer.writerow([r.iteration, r.epoch, repr(r.lr), repr(r.loss)])


def _grads(model: ViViT) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def _run_loop(model: ViViT, n_items: int, tcfg: TrainConfig, base_lr: float, betas, batch_loss: Callable,
              epoch_end: Callable | None = None, checkpoint_path=None, max_iterations: int | None = None):
    if n_items < 1:
        raise InsufficientDataError("training set is empty")
    per_epoch = math.ceil(n_items / tcfg.batch_size)
    total = tcfg.epochs * per_epoch
    if max_iterations is not None:
        total = min(total, max_iterations)
    sched = ScheduleConfig(base_lr, total, 0.0, int(round(tcfg.warmup_frac * total)))
    state = OptimizerState(betas, tcfg.eps, tcfg.weight_decay, no_decay_names(model.params))
    accum = GradAccumulator(tcfg.grad_accum)
    params = {n: p.data for n, p in model.params.items()}
    rows, steps, it = [], 0, 0
    for epoch in range(tcfg.epochs):
        order = np.random.default_rng([tcfg.seed, epoch, 7]).permutation(n_items)
        for b in range(per_epoch):
            if it >= total:
                break
            batch = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            lr = cosine_lr(it, sched)
            loss = batch_loss(batch, epoch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at iteration {it + 1}")
            T.backward(loss)
            averaged = accum.add(_grads(model))
            if averaged is not None:
                adamw_step(params, averaged, state, lr)
                steps += 1
            it += 1
            rows.append(LogRow(it, epoch, lr, value))
        log.info("epoch %d: mean loss %.4f", epoch, np.mean([r.loss for r in rows if r.epoch == epoch] or [0]))
        if epoch_end is not None:
            epoch_end(epoch)
        if checkpoint_path and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            p = Path(checkpoint_path)
            save_checkpoint(model.state_dict(), p.with_name(f"{p.stem}.epoch{epoch + 1:03d}{p.suffix}"))
        if it >= total:
            break
    return rows, steps


def pretrain(dataset: ClipDataset, cfg: ModelConfig, tcfg: TrainConfig, checkpoint_path=None,
             max_iterations: int | None = None) -> TrainResult:
    """Masked-autoencoder pretraining of encoder + decoder."""
    if len(dataset) == 0:
        raise ConfigError("pretraining needs a non-empty dataset")
    model = ViViT(cfg, seed=tcfg.seed, head=False, decoder=True)
    n_tokens = token_grid(cfg)[3]

    def batch_loss(batch, epoch):
        losses = []
        for i in batch:
            video = dataset.train_video(int(i), clip_seed(tcfg.seed, epoch, int(i), 0), tcfg.augment_strength)
            plan = make_mask_plan(n_tokens, cfg.mask_ratio, clip_seed(tcfg.seed, epoch, int(i), 1))
            losses.append(mae_loss(video, model.params, cfg, plan))
        return T.scale(_total(losses), 1.0 / len(losses))

    rows, steps = _run_loop(model, len(dataset), tcfg, tcfg.pretrain_lr, (tcfg.beta1, tcfg.pretrain_beta2),
                            batch_loss, checkpoint_path=checkpoint_path, max_iterations=max_iterations)
    return TrainResult(model, rows, steps)


def _total(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return total


def predict(dataset: ClipDataset, cfg: ModelConfig, params) -> list[EvalPair]:
    pairs = []
    with no_grad():
        for i in range(len(dataset)):
            pred = predict_ef(dataset.eval_video(i), cfg, params).item()
            pairs.append(EvalPair(dataset.label(i), pred, dataset.rows[i].file_name))
    return pairs


def evaluate(dataset: ClipDataset, cfg: ModelConfig, params):
    return compute_report(predict(dataset, cfg, params))


def finetune(dataset: ClipDataset, cfg: ModelConfig, tcfg: TrainConfig, init_state: dict | None = None,
             val_dataset: ClipDataset | None = None, checkpoint_path=None,
             max_iterations: int | None = None) -> TrainResult:
    """Supervised EF regression from a pretrained encoder (or random init when ``init_state`` is None)."""
    if len(dataset) == 0:
        raise ConfigError("fine-tuning needs a non-empty dataset")
    model = ViViT(cfg, seed=tcfg.seed, head=True, decoder=False)
    if init_state is not None:
        model.load_state(init_state, prefixes=("enc.",))
    # start the fresh head at the mean training label so early steps fit the spread, not the offset
    model.params["head.bias"].data[:] = np.mean([dataset.label(i) for i in range(len(dataset))])

    def batch_loss(batch, epoch):
        losses = []
        for i in batch:
            video = dataset.train_video(int(i), clip_seed(tcfg.seed, epoch, int(i), 0), tcfg.augment_strength)
            pred = predict_ef(video, cfg, model.params)
            losses.append(T.mse_loss(T.reshape(pred, (1,)), Tensor([dataset.label(int(i))])))
        return T.scale(_total(losses), 1.0 / len(losses))

    result = TrainResult(model, [], 0)

    def epoch_end(epoch):
        if val_dataset is None or len(val_dataset) == 0:
            return
        pairs = predict(val_dataset, cfg, model.params)
        mae = float(np.mean([abs(p.truth - p.prediction) for p in pairs]))
        result.val_history.append(mae)
        log.info("epoch %d: validation MAE %.3f", epoch, mae)
        if result.best_val_mae is None or mae < result.best_val_mae:
            result.best_val_mae = mae
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}

    rows, steps = _run_loop(model, len(dataset), tcfg, tcfg.finetune_lr, (tcfg.beta1, tcfg.finetune_beta2),
                            batch_loss, epoch_end, checkpoint_path, max_iterations)
    result.log, result.optimizer_steps = rows, steps
    return result
