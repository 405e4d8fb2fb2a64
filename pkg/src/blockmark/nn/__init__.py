"""Minimal deterministic neural-network engine (numpy forward/backward)."""

from .loss import softmax_cross_entropy
from .model import Model, load_model, save_model
from .optim import OneCycleSchedule, OptimizerState, init_optimizer, sgd_step
from .train import (
    TrainSettings,
    accuracy,
    default_architecture,
    loss_and_grad,
    predict_labels,
    train_model,
)

__all__ = [
    "Model",
    "OneCycleSchedule",
    "OptimizerState",
    "TrainSettings",
    "accuracy",
    "default_architecture",
    "init_optimizer",
    "load_model",
    "loss_and_grad",
    "predict_labels",
    "save_model",
    "sgd_step",
    "softmax_cross_entropy",
    "train_model",
]
