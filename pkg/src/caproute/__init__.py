"""Modular capsule-routing network with gated memory and a synthetic planted-rule task."""

from .config import AblationConfig, RunConfig, tiny_config
from .network import (
    ModelParams,
    RouteTrace,
    bce_loss,
    discretize_paths,
    forward_instance,
    init_model,
    predict,
    run_network,
    vqa_accuracy,
)
from .synthetic import Instance, TaskSpec, generate_dataset, load_split, oracle_label, write_dataset
from .training import AdamState, adam_step, evaluate, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "AdamState",
    "Instance",
    "ModelParams",
    "RouteTrace",
    "RunConfig",
    "TaskSpec",
    "adam_step",
    "bce_loss",
    "discretize_paths",
    "evaluate",
    "forward_instance",
    "generate_dataset",
    "init_model",
    "load_split",
    "lr_schedule",
    "oracle_label",
    "predict",
    "run_network",
    "tiny_config",
    "train",
    "vqa_accuracy",
    "write_dataset",
]

