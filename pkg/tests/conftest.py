"""Shared fixtures: micro-scale configs and an untrained backbone.

Everything expensive is session-scoped.  The "micro" configuration keeps
every module at its smallest legal size so structural and numerical tests
run in seconds; training-behavior tests build their own slightly larger
configs on top of it.
"""

import numpy as np
import pytest
import torch

from canonface.config import PipelineConfig
from canonface.backbone import Backbone
from canonface.losses import IdentityRecognizer, LatentOracleEmbedder
from canonface.motion import MotionExtractor
from canonface.warp import AppearanceDecoder, AppearanceEncoder


def make_micro_config(**overrides) -> PipelineConfig:
    base = dict(
        image_size=64,
        channels=8,
        depth=4,
        enc_width=8,
        extractor_width=8,
        extractor_mlp=32,
        recognizer_width=8,
        refiner_width=4,
        disc_width=8,
        pim_blocks=2,
        pim_kernel=3,
        pim_mask_hidden=8,
        batch_size=2,
        total_steps=2,
        n_identities=4,
        poses_per_identity=2,
        backbone_autoencoder_steps=1,
        backbone_extractor_steps=1,
        backbone_recognizer_steps=1,
        seed=0,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def make_untrained_backbone(config: PipelineConfig, seed: int = 0) -> Backbone:
    """Randomly initialized frozen backbone (no pretraining) for structural tests."""
    torch.manual_seed(seed)
    return Backbone(
        encoder=AppearanceEncoder(config.image_size, config.channels, config.depth, config.enc_width),
        decoder=AppearanceDecoder(config.image_size, config.channels, config.depth, config.enc_width),
        extractor=MotionExtractor(
            config.image_size, config.n_keypoints, config.extractor_width, config.extractor_mlp
        ),
        recognizer=IdentityRecognizer(config.image_size, config.id_dim, config.recognizer_width),
        oracle=LatentOracleEmbedder(dim=config.id_dim),
        stats={},
    ).freeze()


@pytest.fixture(scope="session")
def micro_config() -> PipelineConfig:
    return make_micro_config()


@pytest.fixture(scope="session")
def micro_backbone(micro_config) -> Backbone:
    return make_untrained_backbone(micro_config)


@pytest.fixture(scope="session")
def micro_pipeline(micro_config, micro_backbone):
    from canonface.pipeline import SwapPipeline

    return SwapPipeline(micro_config, micro_backbone)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
