"""Canonical-space video face swapping on a synthetic face world.

The pipeline decouples motion from appearance by warping an encoded
appearance volume into a motion-free canonical space, injecting a source
identity there through partially masked modulated convolutions, refining,
and warping back to the target's pose.  A procedural face renderer with
known scene latents supplies training data and exact oracles for every
metric, so the whole system is verifiable on one desk-size machine.
"""

from .config import DEFAULT_CONFIG_TOML, PipelineConfig, load_config, write_default_config
from .losses import (
    IdentityRecognizer,
    LatentOracleEmbedder,
    LossTerms,
    LossWeights,
    MotionReadback,
    PatchDiscriminator,
    PerceptualEmbedder,
    SwapOutputs,
    adversarial_pair,
    feature_distance,
    identity_loss,
    mask_loss,
    motion_loss,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
    total_variation,
)
from .metrics import (
    SyncEmbeddings,
    best_sync_offset,
    ear,
    ear_metric,
    frechet_distance,
    gaussian_moments,
    gaze_error,
    id_retrieval,
    id_similarity,
    optical_flow,
    sync_metrics,
    temporal_consistency,
)
from .motion import (
    KeypointSet,
    MotionExtractor,
    MotionParams,
    animation_retarget,
    axis_angle_from_matrix,
    canonical_pair,
    compose_keypoints,
    estimate_deformation,
    euler_to_matrix,
    project_to_rotation,
    swap_canonical,
)
from .backbone import Backbone, FramePool, build_frame_pool, evaluate_backbone, pretrain_backbone
from .pim import PimBlock, PimStack, modulated_conv, standard_conv
from .pipeline import (
    FORMAT_VERSION,
    LOG_HEADER,
    PairSampler,
    SwapPipeline,
    load_benchmark,
    make_benchmark,
    save_benchmark,
    train_pipeline,
)
from .refine import VolumeRefiner, refine_volume
from .synthworld import (
    Clip,
    GroundTruth,
    SceneLatents,
    canonical_keypoints,
    identity_features,
    load_clip,
    make_clip,
    make_scene_latents,
    part_mask_stack,
    render_face,
    sample_identity,
    sample_latents,
    save_clip,
    smooth_trajectory,
)
from .util import as_image_tensor, psnr, to_numpy_image
from .warp import AppearanceDecoder, AppearanceEncoder, identity_field, warp_volume

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
