"""Mixup combined with sharpness-aware weight perturbation, on a small numpy autodiff engine."""
from .augment import MixupConfig, apply_mixup, mix_loss, mixup_batch, sample_lambda
from .data import Dataset, LabeledBatch, batches, gen_two_moons, load_csv, load_idx, one_hot
from .model import MlpSpec, ModelParams, forward_losses, init_model, params_to_vector, vector_to_params
from .sharpness import SamConfig, compute_delta, partition_by_sensitivity, perturbed_grad
from .trainers import METHODS, RunHistory, TrainConfig, decompose_gradient, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "MixupConfig",
    "apply_mixup",
    "mix_loss",
    "mixup_batch",
    "sample_lambda",
    "Dataset",
    "LabeledBatch",
    "batches",
    "gen_two_moons",
    "load_csv",
    "load_idx",
    "one_hot",
    "MlpSpec",
    "ModelParams",
    "forward_losses",
    "init_model",
    "params_to_vector",
    "vector_to_params",
    "SamConfig",
    "compute_delta",
    "partition_by_sensitivity",
    "perturbed_grad",
    "METHODS",
    "RunHistory",
    "TrainConfig",
    "decompose_gradient",
    "lr_schedule",
    "train",
]
