"""Source-free domain adaptation with adversarially robust source models, on synthetic fundus data."""

from __future__ import annotations

__version__ = "0.1.0"

from .attack import AttackConfig, evaluate_adversarial, pgd_attack
from .losses import LossWeights, entropy_loss, source_loss, target_loss
from .metrics import MetricsReport, aggregate, asd, dice
from .model import Checkpoint, ModelDescriptor, SegNet, init_model, load_checkpoint
from .pipeline import TrainConfig, adapt_target, evaluate, run_ablation, train_source
from .pseudo import PseudoConfig, PseudoSupervision, build_supervision
from .synthdata import DomainSpec, ImageSample, generate_dataset, generate_sample

__all__ = [
    "AttackConfig",
    "Checkpoint",
    "DomainSpec",
    "ImageSample",
    "LossWeights",
    "MetricsReport",
    "ModelDescriptor",
    "PseudoConfig",
    "PseudoSupervision",
    "SegNet",
    "TrainConfig",
    "adapt_target",
    "aggregate",
    "asd",
    "build_supervision",
    "dice",
    "entropy_loss",
    "evaluate",
    "evaluate_adversarial",
    "generate_dataset",
    "generate_sample",
    "init_model",
    "load_checkpoint",
    "pgd_attack",
    "run_ablation",
    "source_loss",
    "target_loss",
    "train_source",
]
