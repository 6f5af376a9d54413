"""Video vision transformer: tubelet tokens, factorised space/time embeddings,
a pre-norm encoder and the dense EF regression head.

Parameters live in a flat ``{name: Tensor}`` dict whose names form the
checkpoint schema, e.g. ``enc.block3.attn.qkv.weight``. Dense weights are
stored ``(in, out)`` so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError
from .tensor import Tensor


def token_grid(cfg: ModelConfig) -> tuple[int, int, int, int]:
    """(t, h, w, n_tokens) for the tubelet grid implied by ``cfg``."""
    if cfg.image_size % cfg.patch_size:
        raise ConfigError(f"image_size={cfg.image_size} is not divisible by patch_size={cfg.patch_size}")
    if cfg.num_frames % cfg.tubelet_depth:
        raise ConfigError(f"num_frames={cfg.num_frames} is not divisible by tubelet_depth={cfg.tubelet_depth}")
    h = w = cfg.image_size // cfg.patch_size
    t = cfg.num_frames // cfg.tubelet_depth
    return t, h, w, t * h * w


def tubelet_dim(cfg: ModelConfig) -> int:
    return cfg.tubelet_depth * cfg.patch_size * cfg.patch_size


@dataclass
class TokenSequence:
    tokens: Tensor
    grid: tuple[int, int, int]
    has_class_token: bool = False

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class EncoderOutput:
    latent: Tensor
    has_class_token: bool = False


# --------------------------------------------------------------------------
# schema and initialisation


def _block_schema(prefix: str, dim: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    hidden = dim * mlp_ratio
    return {
        f"{prefix}.norm1.weight": (dim,),
        f"{prefix}.norm1.bias": (dim,),
        f"{prefix}.attn.qkv.weight": (dim, 3 * dim),
        f"{prefix}.attn.qkv.bias": (3 * dim,),
        f"{prefix}.attn.proj.weight": (dim, dim),
        f"{prefix}.attn.proj.bias": (dim,),
        f"{prefix}.norm2.weight": (dim,),
        f"{prefix}.norm2.bias": (dim,),
        f"{prefix}.mlp.fc1.weight": (dim, hidden),
        f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, dim),
        f"{prefix}.mlp.fc2.bias": (dim,),
    }


def encoder_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    t, h, w, _ = token_grid(cfg)
    d = cfg.embed_dim
    schema = {
        "enc.patch_embed.weight": (tubelet_dim(cfg), d),
        "enc.patch_embed.bias": (d,),
        "enc.pos_embed.spatial": (h * w, d),
        "enc.pos_embed.temporal": (t, d),
    }
    if cfg.use_class_token:
        schema["enc.cls_token"] = (1, d)
    for i in range(cfg.depth):
        schema.update(_block_schema(f"enc.block{i}", d, cfg.mlp_ratio))
    return schema


def head_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"head.weight": (cfg.embed_dim, 1), "head.bias": (1,)}


def decoder_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    t, h, w, _ = token_grid(cfg)
    d, dd = cfg.embed_dim, cfg.decoder_dim
    schema = {
        "dec.in_norm.weight": (d,),
        "dec.in_norm.bias": (d,),
        "dec.embed.weight": (d, dd),
        "dec.embed.bias": (dd,),
        "dec.mask_token": (1, dd),
        "dec.pos_embed.spatial": (h * w, dd),
        "dec.pos_embed.temporal": (t, dd),
    }
    for i in range(cfg.decoder_depth):
        schema.update(_block_schema(f"dec.block{i}", dd, cfg.mlp_ratio))
    schema.update({
        "dec.norm.weight": (dd,),
        "dec.norm.bias": (dd,),
        "dec.pred.weight": (dd, tubelet_dim(cfg)),
        "dec.pred.bias": (tubelet_dim(cfg),),
    })
    return schema


def encoder_param_count(cfg: ModelConfig) -> int:
    """Closed form: P*D + D + (h*w + t)*D [+ D] + depth*((4 + 2m)*D^2 + (9 + m)*D)."""
    t, h, w, _ = token_grid(cfg)
    d, m = cfg.embed_dim, cfg.mlp_ratio
    count = tubelet_dim(cfg) * d + d + (h * w + t) * d
    if cfg.use_class_token:
        count += d
    return count + cfg.depth * ((4 + 2 * m) * d * d + (9 + m) * d)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(schema: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in schema.items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("norm1.weight", "norm2.weight", "norm.weight")):
            data = np.ones(shape)
        elif leaf == "bias":
            data = np.zeros(shape)
        else:
            data = trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def zeros_like_schema(schema) -> dict[str, Tensor]:
    return {name: Tensor(np.zeros(shape), requires_grad=True) for name, shape in schema.items()}


# --------------------------------------------------------------------------
# forward pieces


def linear(x: Tensor, params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def patchify(video: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(frames, H, W) array -> (n_tokens, tubelet_depth * p * p), same order as tubelet_embed."""
    t, h, w, n = token_grid(cfg)
    d, p = cfg.tubelet_depth, cfg.patch_size
    x = np.asarray(video).reshape(t, d, h, p, w, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, d * p * p)


def unpatchify(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    t, h, w, _ = token_grid(cfg)
    d, p = cfg.tubelet_depth, cfg.patch_size
    x = np.asarray(tokens).reshape(t, h, w, d, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(t * d, h * p, w * p)


def tubelet_embed(video: Tensor, cfg: ModelConfig, params) -> TokenSequence:
    """Flatten each (depth x p x p) tubelet and project it to embed_dim.

    Tokens are ordered time-major, then row-major over the spatial grid.
    """
    expected = (cfg.num_frames, cfg.image_size, cfg.image_size)
    if video.shape != expected:
        raise ConfigError(f"video shape {video.shape} does not match config {expected}")
    t, h, w, n = token_grid(cfg)
    d, p = cfg.tubelet_depth, cfg.patch_size
    x = T.reshape(video, (t, d, h, p, w, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (n, d * p * p))
    return TokenSequence(linear(x, params, "enc.patch_embed"), (t, h, w))


def add_embeddings(seq: TokenSequence, pos_table: Tensor, temporal_table: Tensor,
                   class_token: Tensor | None = None) -> TokenSequence:
    """token(tau, y, x) += pos[y*w + x] + temporal[tau]; optional class token goes first."""
    if seq.has_class_token:
        raise ConfigError("embeddings must be added before the class token is prepended")
    t, h, w = seq.grid
    dim = seq.tokens.shape[-1]
    if pos_table.shape != (h * w, dim) or temporal_table.shape != (t, dim):
        raise ConfigError(f"embedding tables {pos_table.shape}/{temporal_table.shape} do not match "
                          f"grid {seq.grid} with dim {dim}")
    x = T.reshape(seq.tokens, (t, h * w, dim))
    x = T.add(x, T.reshape(pos_table, (1, h * w, dim)))
    x = T.add(x, T.reshape(temporal_table, (t, 1, dim)))
    x = T.reshape(x, (t * h * w, dim))
    if class_token is not None:
        return TokenSequence(T.concat([class_token, x], axis=0), seq.grid, True)
    return TokenSequence(x, seq.grid, False)


def attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    n, dim = x.shape
    dh = dim // heads
    qkv = linear(x, params, f"{prefix}.qkv")
    qkv = T.transpose(T.reshape(qkv, (n, 3, heads, dh)), (1, 2, 0, 3))  # (3, heads, n, dh)
    q = T.reshape(T.gather_rows(qkv, [0]), (heads, n, dh))
    k = T.reshape(T.gather_rows(qkv, [1]), (heads, n, dh))
    v = T.reshape(T.gather_rows(qkv, [2]), (heads, n, dh))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    out = T.matmul(T.softmax_lastdim(scores), v)  # (heads, n, dh)
    out = T.reshape(T.transpose(out, (1, 0, 2)), (n, dim))
    return linear(out, params, f"{prefix}.proj")


def block_forward(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    x = T.add(x, attention(h, params, f"{prefix}.attn", heads))
    h = T.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    h = linear(T.gelu(linear(h, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return T.add(x, h)


def encoder_forward(seq: TokenSequence, params, cfg: ModelConfig) -> EncoderOutput:
    """Run the pre-norm blocks; the token count is preserved."""
    x = seq.tokens
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim:
        raise ConfigError(f"encoder expects (n, {cfg.embed_dim}) tokens, got {x.shape}")
    for i in range(cfg.depth):
        x = block_forward(x, params, f"enc.block{i}", cfg.heads)
    return EncoderOutput(x, seq.has_class_token)


def regression_head(latent: EncoderOutput, cfg: ModelConfig, params) -> Tensor:
    """Class-token row (if present) or mean over tokens, then one dense layer -> scalar EF."""
    x = latent.latent
    if latent.has_class_token and cfg.use_class_token:
        pooled = T.gather_rows(x, [0])
    else:
        tokens = T.gather_rows(x, np.arange(1, x.shape[0])) if latent.has_class_token else x
        pooled = T.tmean(tokens, axis=0, keepdims=True)
    out = linear(pooled, params, "head")
    return T.reshape(out, ())


def embed_video(video: Tensor, cfg: ModelConfig, params) -> TokenSequence:
    """Tubelet projection plus positional/temporal embeddings, without class token."""
    seq = tubelet_embed(video, cfg, params)
    return add_embeddings(seq, params["enc.pos_embed.spatial"], params["enc.pos_embed.temporal"])


def prepend_class_token(seq: TokenSequence, params) -> TokenSequence:
    return TokenSequence(T.concat([params["enc.cls_token"], seq.tokens], axis=0), seq.grid, True)


def predict_ef(video: Tensor, cfg: ModelConfig, params) -> Tensor:
    seq = embed_video(video, cfg, params)
    if cfg.use_class_token:
        seq = prepend_class_token(seq, params)
    return regression_head(encoder_forward(seq, params, cfg), cfg, params)


class ViViT:
    """Parameter container for the encoder (+ head and/or MAE decoder)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, head: bool = True, decoder: bool = False):
        self.cfg = cfg
        self.schema = dict(encoder_schema(cfg))
        if head:
            self.schema.update(head_schema(cfg))
        if decoder:
            self.schema.update(decoder_schema(cfg))
        self.params = init_params(self.schema, np.random.default_rng(seed))

    def __call__(self, video: Tensor) -> Tensor:
        return predict_ef(video, self.cfg, self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return sum(int(np.prod(s)) for n, s in self.schema.items() if n.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], prefixes: tuple[str, ...] = ("",)):
        """Copy tensors whose names start with one of ``prefixes``; schema must match exactly."""
        from .checkpoint import verify_schema

        wanted = {n: s for n, s in self.schema.items() if n.startswith(prefixes)}
        provided = {n: tuple(a.shape) for n, a in state.items() if n.startswith(prefixes)}
        verify_schema(provided, wanted)
        for name in wanted:
            self.params[name].data = np.array(state[name], dtype=np.float32)


def dry_run(cfg: ModelConfig) -> dict:
    """Shape-level construction check without allocating model weights."""
    t, h, w, n = token_grid(cfg)
    zeros = np.zeros((cfg.num_frames, cfg.image_size, cfg.image_size), dtype=np.float32)
    tokens = patchify(zeros, cfg)
    schema = encoder_schema(cfg)
    decoder = decoder_schema(cfg)
    if tokens.shape != (n, schema["enc.patch_embed.weight"][0]):
        raise ConfigError(f"tubelet layout {tokens.shape} disagrees with the embedding schema")
    if schema["enc.pos_embed.spatial"][0] * schema["enc.pos_embed.temporal"][0] != n:
        raise ConfigError("embedding tables do not tile the token grid")
    if decoder["dec.pred.weight"][1] != tokens.shape[1]:
        raise ConfigError("decoder output width disagrees with the tubelet size")
    return {
        "grid": (t, h, w),
        "n_tokens": n,
        "encoder_tokens": n + int(cfg.use_class_token),
        "tubelet_dim": tokens.shape[1],
        "encoder_params": sum(int(np.prod(s)) for s in schema.values()),
        "decoder_params": sum(int(np.prod(s)) for s in decoder.values()),
    }
