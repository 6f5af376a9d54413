import numpy as np
import pytest

from echoai.config import ModelConfig, load_run_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run():
    return load_run_config("toy")


@pytest.fixture
def tiny_cfg():
    """Smallest useful model: 16x16 frames, 4 frames, 2x2x2 = 8 tubelets."""
    return ModelConfig(arch_size="TOY", image_size=16, num_frames=4, patch_size=8, tubelet_depth=2,
                       recon_frames=2, embed_dim=16, depth=2, heads=2, decoder_dim=16, decoder_depth=1,
                       decoder_heads=2, mlp_ratio=2, sampling_rate=1)
