"""Tri-modal point cloud pre-training with a differentiable depth renderer.

The package aligns point-cloud, RGB, and depth embeddings of the same
object: a shared transformer encodes grouped points for two masked
auto-encoding branches (discrete tokens and raw points), a differentiable
Gaussian-splat renderer turns reconstructions into depth images from a
fixed 32-pose rig, and contrastive objectives tie the three modality
embeddings together. Everything runs deterministically on the CPU in
float64, with analytic gradients verified against finite differences.
"""

from .backbone import (
    Codebook,
    EncoderConfig,
    GroupedTokens,
    ImageEncoderConfig,
    embed_groups,
    encode,
    encode_image,
    fit_codebook,
    fps,
    knn_group,
    mask_tokens,
    momentum_update,
    tokenize,
)
from .data import (
    Triplet,
    augment_cloud,
    augment_rgb,
    build_synth_dataset,
    load_png,
    load_xyz,
    make_triplet,
    save_png,
    save_xyz,
    synth_shapes,
)
from .errors import DomainError, FormatError, ParseError
from .geometry import (
    CameraPose,
    PointCloud,
    RenderConfig,
    generate_camera_poses,
    normalize_cloud,
    world_to_camera,
)
from .losses import (
    ContrastiveHead,
    EmbeddingBatch,
    LossWeights,
    MocoState,
    chamfer,
    cross_modal_nce,
    dr_loss,
    fscore,
    moco_loss,
    moco_update,
    token_ce,
    total_loss,
)
from .renderer import (
    DepthImage,
    OccupancyGrid,
    TerminationVolume,
    project_depth,
    ray_termination,
    render,
    render_vjp,
    splat_occupancy,
)
from .trainer import (
    TrainConfig,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    cosine_lr,
    desk_config,
    finite_difference_check,
    pretrain,
    pretrain_step,
)

__version__ = "0.1.0"
