import numpy as np
import pytest

from echoai import tensor as T
from echoai.config import PRESETS, ModelConfig, load_run_config
from echoai.errors import ConfigError
from echoai.model import (EncoderOutput, TokenSequence, ViViT, add_embeddings, dry_run, encoder_forward,
                          encoder_param_count, encoder_schema, patchify, predict_ef, regression_head, token_grid,
                          tubelet_embed, unpatchify, zeros_like_schema)
from echoai.tensor import Tensor, gradcheck


def test_token_grid_examples():
    base = ModelConfig(arch_size="LARGE", image_size=112, num_frames=32, patch_size=16, tubelet_depth=2)
    assert token_grid(base) == (16, 7, 7, 784)
    assert token_grid(base.replace(image_size=224, num_frames=16)) == (8, 14, 14, 1568)
    assert token_grid(ModelConfig(image_size=16, num_frames=1, patch_size=16, tubelet_depth=1,
                                  recon_frames=1)) == (1, 1, 1, 1)


def test_token_grid_divisibility_error_names_the_pair():
    with pytest.raises(ConfigError, match="image_size=30.*patch_size=8"):
        ModelConfig(image_size=30, patch_size=8)


def test_patchify_round_trip(tiny_cfg, rng):
    video = rng.standard_normal((4, 16, 16))
    assert np.array_equal(unpatchify(patchify(video, tiny_cfg), tiny_cfg), video)


def test_zero_video_and_bias_give_zero_tokens(tiny_cfg):
    params = ViViT(tiny_cfg).params
    params["enc.patch_embed.bias"] = Tensor(np.zeros(16))
    seq = tubelet_embed(Tensor(np.zeros((4, 16, 16))), tiny_cfg, params)
    assert seq.n_tokens == 8 and not seq.tokens.data.any()


def test_single_tubelet_embedding_is_flatten_matmul(rng):
    cfg = ModelConfig(image_size=8, num_frames=2, patch_size=8, tubelet_depth=2, recon_frames=2, embed_dim=4,
                      depth=1, heads=1, sampling_rate=1)
    video = rng.standard_normal((2, 8, 8))
    w, b = rng.standard_normal((128, 4)), rng.standard_normal(4)
    seq = tubelet_embed(Tensor(video), cfg, {"enc.patch_embed.weight": Tensor(w), "enc.patch_embed.bias": Tensor(b)})
    # flatten order inside a tubelet is (frame, row, column)
    assert np.allclose(seq.tokens.data[0], video.reshape(-1) @ w + b, atol=1e-4)


def test_token_order_is_time_major_then_row_major(tiny_cfg):
    video = np.zeros((4, 16, 16))
    video[2:4, 8:16, 0:8] = 1.0  # second tubelet slab, bottom-left patch
    tokens = patchify(video, tiny_cfg)
    assert np.flatnonzero(tokens.any(axis=1)).tolist() == [1 * 4 + 1 * 2 + 0]


def test_add_embeddings(rng):
    grid = (2, 2, 2)
    tokens = Tensor(np.tile(rng.standard_normal(3), (8, 1)))
    zero = add_embeddings(TokenSequence(tokens, grid), Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 3))))
    assert np.array_equal(zero.tokens.data, tokens.data)
    pos, tem = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    out = add_embeddings(TokenSequence(tokens, grid), Tensor(pos), Tensor(tem)).tokens.data
    # tokens 4 and 6 share time index 1 and sit at spatial slots 0 and 2
    assert np.allclose(out[6] - out[4], pos[2] - pos[0], atol=1e-6)
    with pytest.raises(ConfigError):
        add_embeddings(TokenSequence(tokens, grid), Tensor(np.zeros((3, 3))), Tensor(np.zeros((2, 3))))


def test_residual_identity_with_zero_output_projections(tiny_cfg, rng):
    params = ViViT(tiny_cfg, seed=1).params
    for i in range(tiny_cfg.depth):
        for name in ("attn.proj", "mlp.fc2"):
            params[f"enc.block{i}.{name}.weight"] = Tensor(np.zeros((params[f"enc.block{i}.{name}.weight"].shape)))
            params[f"enc.block{i}.{name}.bias"] = Tensor(np.zeros(16))
    x = rng.standard_normal((8, 16)).astype(np.float32)
    out = encoder_forward(TokenSequence(Tensor(x), (2, 2, 2)), params, tiny_cfg).latent.data
    assert np.array_equal(out, x)


def test_self_attention_is_permutation_equivariant(tiny_cfg, rng):
    cfg = tiny_cfg.replace(depth=1)
    params = ViViT(cfg, seed=2).params
    x = rng.standard_normal((8, 16))
    perm = rng.permutation(8)
    out = encoder_forward(TokenSequence(Tensor(x), (2, 2, 2)), params, cfg).latent.data
    out_p = encoder_forward(TokenSequence(Tensor(x[perm]), (2, 2, 2)), params, cfg).latent.data
    assert np.allclose(out_p[np.argsort(perm)], out, atol=1e-5)


def test_encoder_gradient_matches_finite_differences(tiny_cfg, rng):
    params = {k: Tensor(v.data, dtype=np.float64) for k, v in ViViT(tiny_cfg, seed=3).params.items()}
    w = Tensor(rng.standard_normal((8, 16)), dtype=np.float64)

    def fn(x, qkv):
        ps = dict(params, **{"enc.block1.attn.qkv.weight": qkv})
        return T.tsum(T.mul(encoder_forward(TokenSequence(x, (2, 2, 2)), ps, tiny_cfg).latent, w))

    report = gradcheck(fn, [rng.standard_normal((8, 16)), params["enc.block1.attn.qkv.weight"].data],
                       max_per_input=40)
    assert report.ok, str(report)


def test_regression_head_examples(tiny_cfg, rng):
    latent = EncoderOutput(Tensor(rng.standard_normal((5, 16))))
    zero = {"head.weight": Tensor(np.zeros((16, 1))), "head.bias": Tensor([42.5])}
    assert regression_head(latent, tiny_cfg, zero).item() == pytest.approx(42.5)
    onehot = np.zeros((16, 1))
    onehot[3] = 1
    single = EncoderOutput(Tensor(np.arange(16.0)[None]))
    assert regression_head(single, tiny_cfg, {"head.weight": Tensor(onehot), "head.bias": Tensor([0.0])}).item() == 3.0
    two = EncoderOutput(Tensor(np.array([[1.0] * 16, [3.0] * 16])))
    w = np.full((16, 1), 0.5)
    # mean row is all 2s; 16 * 2 * 0.5 + 1 = 17
    assert regression_head(two, tiny_cfg, {"head.weight": Tensor(w), "head.bias": Tensor([1.0])}).item() == 17.0


def test_class_token_pooling(tiny_cfg):
    cfg = tiny_cfg.replace(use_class_token=True)
    x = np.zeros((9, 16))
    x[0] = 1.0
    onehot = np.zeros((16, 1))
    onehot[0] = 1
    params = {"head.weight": Tensor(onehot), "head.bias": Tensor([0.0])}
    assert regression_head(EncoderOutput(Tensor(x), True), cfg, params).item() == 1.0
    out = ViViT(cfg)(Tensor(np.zeros((4, 16, 16))))
    assert out.shape == ()


def test_param_count_formula_matches_schema(tiny_cfg):
    for cfg in (tiny_cfg, tiny_cfg.replace(use_class_token=True), load_run_config("exp2").model):
        assert encoder_param_count(cfg) == sum(int(np.prod(s)) for s in encoder_schema(cfg).values())


def test_large_encoder_size_is_plausible():
    cfg = load_run_config("exp3").model
    assert 300e6 < encoder_param_count(cfg) < 310e6


@pytest.mark.parametrize("preset", PRESETS)
def test_every_preset_dry_runs(preset):
    cfg = load_run_config(preset).model
    info = dry_run(cfg)
    assert info["n_tokens"] == token_grid(cfg)[3]


def test_zero_weights_model_predicts_head_bias(tiny_cfg):
    model = ViViT(tiny_cfg)
    params = zeros_like_schema(model.schema)
    params["head.bias"] = Tensor([50.0])
    for name in params:
        if name.endswith(("norm1.weight", "norm2.weight")):
            params[name] = Tensor(np.ones(params[name].shape))
    assert predict_ef(Tensor(np.ones((4, 16, 16))), tiny_cfg, params).item() == 50.0
