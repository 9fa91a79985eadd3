"""Tri-modal (image / brain-response / caption) alignment toolkit.

Trains small transformer encoders with a weighted contrastive objective,
proposes subject tokens from captions, retrieves matching features from the
other modalities, and localizes subject-specific brain ROIs by thresholded
attention maps.
"""

from .autodiff import Tensor, grad_check
from .config import RunConfig, load_run_config
from .data import GenConfig, generate_dataset, load_dataset, kfold_split
from .encoders import (
    EncoderConfig,
    FlattenMap,
    FmriEncoder,
    TextEncoder,
    VisualEncoder,
)
from .estimator import BractiveAligner
from .losses import LossConfig, contras, global_loss, total_loss, weighted_soi_loss
from .roi import LocalizeConfig, attention_map, dice, threshold_mask
from .soip import SoipParams, propose
from .soir import retrieve
from .training import (
    AdamW,
    BractiveModel,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "AdamW",
    "BractiveAligner",
    "BractiveModel",
    "EncoderConfig",
    "FlattenMap",
    "FmriEncoder",
    "GenConfig",
    "LocalizeConfig",
    "LossConfig",
    "RunConfig",
    "SoipParams",
    "Tensor",
    "TextEncoder",
    "TrainConfig",
    "VisualEncoder",
    "attention_map",
    "contras",
    "dice",
    "evaluate",
    "generate_dataset",
    "global_loss",
    "grad_check",
    "kfold_split",
    "load_checkpoint",
    "load_dataset",
    "load_run_config",
    "propose",
    "retrieve",
    "save_checkpoint",
    "threshold_mask",
    "total_loss",
    "train",
    "weighted_soi_loss",
]

__version__ = "0.1.0"
