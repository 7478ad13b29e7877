"""Segmentation of heavily imbalanced organs in 3D volumes.

A dense backbone segments everything at once; tiny structures are then
re-segmented by dedicated binary heads inside small regions of interest
found by a Gaussian-heatmap localizer.  Training is staged: backbone,
localizer, refinement heads, then a joint finetune.  A synthetic phantom
generator provides reproducible datasets for experiments and tests.
"""

from .config import ConfigError, RunConfig, load_run_config, save_run_config
from .losses import LossConfig, focal_loss, generalized_dice_loss, total_loss
from .metrics import aggregate, dsc, evaluate_case, hd95
from .phantom import (
    Manifest,
    OrganDef,
    PhantomSpec,
    default_phantom_spec,
    generate_dataset,
    generate_phantom,
    load_manifest,
)
from .snet import SNet, SNetConfig, build_snet, snet_forward
from .sol import SOLNet, build_solnet, locate_peak, make_target_heatmaps, sol_forward
from .sos import SOSHead, build_sosnet, fuse_predictions, roi_box, sos_forward
from .training import (
    Checkpoint,
    StageSchedule,
    StagingError,
    TrainConfig,
    bundle_from_checkpoint,
    evaluate_manifest,
    load_checkpoint,
    predict_labelmap,
    run_stages,
    save_checkpoint,
)
from .voldata import LabelMap, OrganSpec, Volume, load_labels, load_volume

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "LabelMap",
    "LossConfig",
    "Manifest",
    "OrganDef",
    "OrganSpec",
    "PhantomSpec",
    "RunConfig",
    "SNet",
    "SNetConfig",
    "SOLNet",
    "SOSHead",
    "StageSchedule",
    "StagingError",
    "TrainConfig",
    "Volume",
    "aggregate",
    "build_snet",
    "build_solnet",
    "build_sosnet",
    "bundle_from_checkpoint",
    "default_phantom_spec",
    "dsc",
    "evaluate_case",
    "evaluate_manifest",
    "focal_loss",
    "fuse_predictions",
    "generalized_dice_loss",
    "generate_dataset",
    "generate_phantom",
    "hd95",
    "load_checkpoint",
    "load_labels",
    "load_manifest",
    "load_run_config",
    "load_volume",
    "locate_peak",
    "make_target_heatmaps",
    "predict_labelmap",
    "roi_box",
    "run_stages",
    "save_checkpoint",
    "save_run_config",
    "snet_forward",
    "sol_forward",
    "sos_forward",
    "total_loss",
    "__version__",
]
