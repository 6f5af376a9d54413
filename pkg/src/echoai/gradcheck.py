"""Finite-difference checks for every differentiable op and the TOY model end to end."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .mae import build_recon_target, make_mask_plan, mae_loss
from .model import ViViT, predict_ef, token_grid
from .tensor import Tensor, gradcheck

# dim <= 32 and <= 2 blocks keeps the end-to-end check to a few seconds
TINY = ModelConfig(arch_size="TOY", image_size=16, num_frames=4, patch_size=8, tubelet_depth=2,
                   recon_frames=2, embed_dim=16, depth=2, heads=2, decoder_dim=16, decoder_depth=1,
                   decoder_heads=2, mlp_ratio=2, target_norm="per_token", sampling_rate=1)


def _weighted(fn, weight: np.ndarray):
    """Scalarise an op output with fixed random weights so every entry matters."""
    w = Tensor(weight, dtype=np.float64)
    return lambda *xs: T.tsum(T.mul(fn(*xs), w))


def op_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    cases = [
        ("matmul", lambda a, b: T.matmul(a, b), [r((3, 4)), r((4, 2))], (3, 2)),
        ("batched matmul", lambda a, b: T.matmul(a, b), [r((2, 3, 4)), r((4, 2))], (2, 3, 2)),
        ("add (broadcast)", lambda a, b: T.add(a, b), [r((3, 4)), r((4,))], (3, 4)),
        ("sub (broadcast)", lambda a, b: T.sub(a, b), [r((3, 1)), r((3, 4))], (3, 4)),
        ("mul (broadcast)", lambda a, b: T.mul(a, b), [r((2, 3, 4)), r((1, 3, 1))], (2, 3, 4)),
        ("scale", lambda a: T.scale(a, -2.5), [r((4, 4))], (4, 4)),
        ("reshape", lambda a: T.reshape(a, (6, 4)), [r((2, 3, 4))], (6, 4)),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))], (4, 2, 3)),
        ("gather_rows", lambda a: T.gather_rows(a, [2, 0, 2]), [r((4, 5))], (3, 5)),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [r((2, 4)), r((3, 4))], (5, 4)),
        ("sum axis", lambda a: T.tsum(a, axis=1), [r((3, 5))], (3,)),
        ("mean keepdims", lambda a: T.tmean(a, axis=0, keepdims=True), [r((4, 5))], (1, 5)),
        ("softmax_lastdim", T.softmax_lastdim, [3 * r((4, 6))], (4, 6)),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [r((2, 8)), r((8,)), r((8,))], (2, 8)),
        ("gelu", T.gelu, [2 * r((4, 8))], (4, 8)),
    ]
    reports = []
    for name, fn, inputs, out_shape in cases:
        reports.append(gradcheck(_weighted(fn, r(out_shape)), inputs, name=name))
    target = r((3, 4))
    reports.append(gradcheck(lambda p: T.mse_loss(p, Tensor(target, dtype=np.float64)), [r((3, 4))],
                             name="mse_loss", rtol=1e-4))
    w1, w2 = r((5, 8)) * 0.5, r((8, 1)) * 0.5
    x = r((6, 5))
    y = r((6, 1))
    reports.append(gradcheck(
        lambda a, b: T.mse_loss(T.matmul(T.gelu(T.matmul(Tensor(x, dtype=np.float64), a)), b),
                                Tensor(y, dtype=np.float64)),
        [w1, w2], name="2-layer MLP"))
    return reports


def _param_check(loss_of_params, params: dict[str, Tensor], name: str, per_tensor: int, seed: int,
                 extra: dict[str, np.ndarray] | None = None):
    names = list(params)
    extra = extra or {}

    def fn(*leaves):
        bound = dict(zip(names, leaves[:len(names)]))
        inputs = dict(zip(extra, leaves[len(names):]))
        return loss_of_params(bound, **inputs)

    inputs = [params[n].data for n in names] + list(extra.values())
    return gradcheck(fn, inputs, name=name, max_per_input=per_tensor, seed=seed)


def model_checks(cfg: ModelConfig = TINY, per_tensor: int = 4, seed: int = 0):
    """End-to-end regression and reconstruction losses w.r.t. every weight tensor and the input."""
    rng = np.random.default_rng(seed)
    video = rng.standard_normal((cfg.num_frames, cfg.image_size, cfg.image_size))
    model = ViViT(cfg, seed=seed, head=True, decoder=True)
    # perturb from the init so gains/biases are not at symmetric points
    for p in model.params.values():
        p.data = p.data + np.float32(0.1) * rng.standard_normal(p.shape).astype(np.float32)
    enc_head = {n: p for n, p in model.params.items() if not n.startswith("dec.")}
    enc_dec = {n: p for n, p in model.params.items() if not n.startswith("head.")}
    plan = make_mask_plan(token_grid(cfg)[3], 0.5, seed)
    # frozen target: the reconstruction target is a constant of the loss
    target = build_recon_target(video, cfg)
    reports = [
        _param_check(lambda ps, video: T.scale(predict_ef(video, cfg, ps), 0.1), enc_head,
                     "end-to-end EF regression", per_tensor, seed, {"video": video}),
        _param_check(lambda ps, video: mae_loss(video, ps, cfg, plan, target), enc_dec,
                     "end-to-end MAE reconstruction", per_tensor, seed, {"video": video}),
    ]
    return reports


def run_all(per_tensor: int = 4, seed: int = 0):
    return op_checks(seed) + model_checks(per_tensor=per_tensor, seed=seed)
