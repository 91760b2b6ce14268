"""Desk-scale lab for similarity-based classifiers, weight-space model
merging, and merge-robust backdoor attacks on toy models."""

__version__ = "0.1.0"

from .numerics import Rng, matmul, solve_spd
from .model import ToyClipModel, text_embed, predict_logits, finetune_clean
from .data import TaskSpec, Dataset, generate_task, save_dataset, load_dataset
from .merging import (
    MergeConfig,
    TaskVector,
    make_task_vector,
    compose_merged,
    merge_weighted_sum,
    ties_merge,
    regmean_merge,
    adamerging_fit,
)
from .attacks import (
    AttackConfig,
    Trigger,
    apply_trigger,
    build_shadow_classes,
    get_adversarial_example,
    adversarial_augment,
    optimize_universal_trigger,
    fi_loss,
    backdoor_finetune,
    badnets_poison,
)
from .harness import ExperimentConfig, MetricsReport, evaluate, lambda_sweep, run_experiment

__all__ = [
    "Rng",
    "matmul",
    "solve_spd",
    "ToyClipModel",
    "text_embed",
    "predict_logits",
    "finetune_clean",
    "TaskSpec",
    "Dataset",
    "generate_task",
    "save_dataset",
    "load_dataset",
    "MergeConfig",
    "TaskVector",
    "make_task_vector",
    "compose_merged",
    "merge_weighted_sum",
    "ties_merge",
    "regmean_merge",
    "adamerging_fit",
    "AttackConfig",
    "Trigger",
    "apply_trigger",
    "build_shadow_classes",
    "get_adversarial_example",
    "adversarial_augment",
    "optimize_universal_trigger",
    "fi_loss",
    "backdoor_finetune",
    "badnets_poison",
    "ExperimentConfig",
    "MetricsReport",
    "evaluate",
    "lambda_sweep",
    "run_experiment",
]
