import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from facesnap.pipeline.config import TrainConfig


def tiny_config(**overrides) -> TrainConfig:
    """Small but structurally complete configuration for fast tests."""
    base = dict(
        width=8, id_dim=16, clip_dim=12, id_tokens=5, clip_tokens=17, mix_tokens=4,
        heads=1, decoder_depth=1, latent_channels=2, latent_size=8, image_size=32,
        unet_channels=(8, 12, 16), norm_groups=4, shape_dim=4, expr_dim=3,
        timesteps=40, lightning_steps=2, sample_steps=2, batch_size=2, steps=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
