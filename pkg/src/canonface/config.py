"""Pipeline configuration: dataclass, validation, and TOML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .losses import LossWeights


@dataclass
class PipelineConfig:
    """Everything that defines a training/evaluation run.

    The appearance volume is (channels, depth, image_size/4, image_size/4);
    image_size must be a multiple of 8 (the motion extractor downsamples
    three times) and depth even (the refiner pools once).
    """

    image_size: int = 64
    channels: int = 32
    depth: int = 8
    n_keypoints: int = 10
    pim_blocks: int = 4
    pim_kernel: int = 3
    pim_mask_hidden: int = 16
    sigma: float = 0.15
    id_dim: int = 16

    enc_width: int = 32
    refiner_width: int = 16
    disc_width: int = 32
    extractor_width: int = 40
    extractor_mlp: int = 320
    recognizer_width: int = 32

    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 6
    total_steps: int = 5000
    same_identity_prob: float = 0.3
    r1_gamma: float = 10.0

    no_warp: bool = False
    no_mask: bool = False
    no_refine: bool = False

    seed: int = 0
    n_identities: int = 120
    poses_per_identity: int = 6

    backbone_autoencoder_steps: int = 2400
    backbone_extractor_steps: int = 6000
    backbone_recognizer_steps: int = 3000
    backbone_lr: float = 1.5e-3
    backbone_batch: int = 8

    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 8 != 0:
            raise ValueError("image_size must be >= 32 and a multiple of 8")
        if (self.image_size // 4) % 2 != 0:
            raise ValueError("image_size/4 must be even (refiner pools once)")
        if self.depth < 2 or self.depth % 2 != 0:
            raise ValueError("depth must be even and >= 2")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.n_keypoints < 3:
            raise ValueError("pipeline needs n_keypoints >= 3")
        if self.pim_blocks < 1:
            raise ValueError("need at least one modulation block")
        if not (0.0 <= self.same_identity_prob <= 1.0):
            raise ValueError("same_identity_prob must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("batch_size", "total_steps", "n_identities", "poses_per_identity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    @property
    def volume_hw(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> PipelineConfig:
    """Load a PipelineConfig from a TOML file.

    Top-level keys map to config fields; an optional [weights] table maps to
    the loss weights.  Unknown keys are rejected.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return PipelineConfig.from_dict(data)


DEFAULT_CONFIG_TOML = """\
# Swap-pipeline configuration.  All keys optional; defaults shown.

image_size = 64          # rendered/processed resolution (multiple of 8)
channels = 32            # appearance volume channels
depth = 8                # appearance volume depth (even)
n_keypoints = 10
pim_blocks = 4
sigma = 0.15             # keypoint-interpolation bandwidth, scene units
seed = 0

lr = 1e-4
beta1 = 0.5
beta2 = 0.999
weight_decay = 1e-4
batch_size = 6
total_steps = 5000
same_identity_prob = 0.3

# ablations
no_warp = false          # swap in the original space (skip canonical warps)
no_mask = false          # global modulation (fusion mask forced to ones)
no_refine = false        # bypass the volumetric refiner

# swap-training pool (backbone pre-training streams fresh renders instead,
# so these only shape the pairs the modulation/refiner stages see)
n_identities = 120
poses_per_identity = 6

[weights]
lambda_id = 10.0
lambda_p = 5.0
lambda_mo = 5.0
lambda_r = 10.0
lambda_m = 1.0
lambda_g = 1.0
"""


def write_default_config(path) -> None:
    Path(path).write_text(DEFAULT_CONFIG_TOML)
