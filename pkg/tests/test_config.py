import pytest

from echoai.config import (PRESETS, ModelConfig, format_run_config, load_run_config, parse_run_config)
from echoai.errors import ConfigError

# (arch, image, frames, sampling_mode, rate, fps, recon) for the eight search rows
ROWS = {
    "exp1": ("LARGE", 224, 16, "rate", 4, 30.0, 8),
    "exp2": ("BASE", 112, 32, "rate", 3, 50.0, 32),
    "exp3": ("LARGE", 112, 32, "rate", 3, 50.0, 32),
    "exp4": ("LARGE", 112, 16, "rate", 4, 50.0, 8),
    "exp5": ("LARGE", 112, 16, "rate", 4, 50.0, 8),
    "exp6": ("LARGE", 112, 32, "rate", 3, 50.0, 8),
    "exp7": ("LARGE", 112, 32, "rate", 3, 50.0, 16),
    "exp8": ("LARGE", 112, 32, "equally_spaced", None, 50.0, 8),
}


@pytest.mark.parametrize("name", sorted(ROWS))
def test_presets_encode_the_search_rows(name):
    rc = load_run_config(name)
    m = rc.model
    assert (m.arch_size, m.image_size, m.num_frames, m.sampling_mode, m.sampling_rate, m.target_fps,
            m.recon_frames) == ROWS[name]
    assert (m.patch_size, m.tubelet_depth, m.mask_ratio) == (16, 2, 0.9)
    assert (rc.train.pretrain_lr, rc.train.finetune_lr, rc.train.grad_accum, rc.train.epochs) == (0.0016, 0.0024, 2, 50)


def test_every_preset_round_trips_through_text():
    for name in PRESETS:
        rc = load_run_config(name)
        assert parse_run_config(format_run_config(rc)) == rc


def test_unknown_and_duplicate_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key 'learning_rate'"):
        parse_run_config("learning_rate=0.1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_run_config("seed=1\nseed=2\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_run_config("image_size=big\n")


def test_equally_spaced_rejects_a_rate():
    with pytest.raises(ConfigError, match="conflicts"):
        parse_run_config("sampling_mode=equally_spaced\nsampling_rate=3\n")
    assert parse_run_config("sampling_mode=equally_spaced\n").model.sampling_rate is None


def test_invalid_values():
    with pytest.raises(ConfigError):
        ModelConfig(recon_frames=0)
    with pytest.raises(ConfigError):
        ModelConfig(mask_ratio=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(arch_size="HUGE")
    with pytest.raises(ConfigError, match="not found"):
        load_run_config("no-such-file.cfg")


def test_arch_sizes():
    assert (ModelConfig(arch_size="BASE").embed_dim, ModelConfig(arch_size="BASE").depth) == (768, 12)
    large = ModelConfig(arch_size="LARGE")
    assert (large.embed_dim, large.depth, large.heads) == (1024, 24, 16)
    toy = load_run_config("toy").model
    assert toy.embed_dim <= 64 and toy.depth <= 2
