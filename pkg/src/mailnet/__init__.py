"""Multimodal attention network with random-filter and attention-noise defences, on a numpy autograd core."""

from .attacks import AttackConfig, accuracy, attack, predict, robust_accuracy, sweep_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import CostReport, count_flops, count_params
from .data import AugmentSpec, DatasetContainer, SynthSpec, augment, augment_set, modality_synthesize, synth_generate
from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatError, MailError, NumericError,
                     StateError)
from .metrics import MetricsReport, UndefinedMetricError, compute_metrics
from .network import MAIL, NetworkConfig, build_mail, desk_preset, full_preset, tmtl_loss
from .robust import RobustConfig, RPANLayer, adversarial_train_step, regularizer, rpf_summary
from .tensor import Tensor, no_grad
from .train import SGD, PlateauScheduler, TrainConfig, evaluate, fit

__all__ = [
    "AttackConfig", "accuracy", "attack", "predict", "robust_accuracy", "sweep_csv",
    "load_checkpoint", "save_checkpoint",
    "CostReport", "count_flops", "count_params",
    "AugmentSpec", "DatasetContainer", "SynthSpec", "augment", "augment_set", "modality_synthesize",
    "synth_generate",
    "ConfigError", "ContractError", "DataError", "DimensionError", "FormatError", "MailError", "NumericError",
    "StateError",
    "MetricsReport", "UndefinedMetricError", "compute_metrics",
    "MAIL", "NetworkConfig", "build_mail", "desk_preset", "full_preset", "tmtl_loss",
    "RobustConfig", "RPANLayer", "adversarial_train_step", "regularizer", "rpf_summary",
    "Tensor", "no_grad",
    "SGD", "PlateauScheduler", "TrainConfig", "evaluate", "fit",
]
