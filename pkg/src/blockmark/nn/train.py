"""Training loop, evaluation, and the default desk-scale architecture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import AugmentationPolicy, AugmentDraw, augment, sample_draw
from ..errors import EmptyDatasetError
from .loss import softmax_cross_entropy
from .model import Model
from .optim import OneCycleSchedule, init_optimizer, sgd_step

AUG_NONE = 0
AUG_FULL = 1
AUG_FLIP_ONLY = 2


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer and schedule settings for one training run."""

    epochs: int
    batch_size: int = 128
    max_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_frac: float = 0.3
    div_factor: float = 10.0
    final_div_factor: float = 100.0
    seed: int = 0
    augment_pad: int = 4
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def default_architecture(
    input_shape: tuple[int, int, int],
    num_classes: int,
    width: int = 16,
    batchnorm: bool = True,
) -> list[dict]:
    """Small conv net: two conv/relu/pool stages and a dense head.

    Input height and width must be divisible by 4 (two 2x2 poolings).
    `batchnorm` inserts a batch-norm layer after each convolution; plain
    conv stacks degrade more gradually under weight pruning because there
    are no stored activation statistics to fall out of date.
    """
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"input spatial dims {h}x{w} must be divisible by 4")
    layers = [
        {"kind": "conv", "name": "conv1", "in_channels": c,
         "out_channels": width, "kernel": 3, "pad": 1},
        {"kind": "batchnorm", "name": "bn1", "channels": width},
        {"kind": "relu"},
        {"kind": "maxpool", "size": 2},
        {"kind": "conv", "name": "conv2", "in_channels": width,
         "out_channels": 2 * width, "kernel": 3, "pad": 1},
        {"kind": "batchnorm", "name": "bn2", "channels": 2 * width},
        {"kind": "relu"},
        {"kind": "maxpool", "size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "name": "fc",
         "in_features": 2 * width * (h // 4) * (w // 4),
         "out_features": num_classes},
    ]
    if not batchnorm:
        layers = [spec for spec in layers if spec["kind"] != "batchnorm"]
    return layers


def loss_and_grad(model: Model, batch: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and parameter gradients for one batch."""
    logits, caches = model.forward_train(batch)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = model.backward(caches, dlogits)
    return loss, grads


def train_model(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    settings: TrainSettings,
    aug_kinds: np.ndarray | None = None,
) -> list[float]:
    """Train `model` in place; returns the mean loss per epoch.

    `aug_kinds` assigns one of AUG_NONE / AUG_FULL / AUG_FLIP_ONLY per
    sample (default: full augmentation for all). Shuffling, augmentation
    draws, and therefore the whole parameter trajectory are a pure function
    of `settings.seed` and the inputs.
    """
    n = len(images)
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if aug_kinds is None:
        aug_kinds = np.full(n, AUG_FULL, dtype=np.int8)
    policy = AugmentationPolicy(pad=settings.augment_pad, flip_prob=settings.flip_prob)
    batches_per_epoch = (n + settings.batch_size - 1) // settings.batch_size
    schedule = OneCycleSchedule(
        total_steps=settings.epochs * batches_per_epoch,
        max_lr=settings.max_lr,
        warmup_frac=settings.warmup_frac,
        div_factor=settings.div_factor,
        final_div_factor=settings.final_div_factor,
    )
    state = init_optimizer(
        model, schedule, momentum=settings.momentum,
        weight_decay=settings.weight_decay,
    )
    rng = np.random.default_rng(np.random.PCG64(settings.seed))
    epoch_losses = []
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(batches_per_epoch):
            idx = order[b * settings.batch_size : (b + 1) * settings.batch_size]
            batch = _augment_batch(images[idx], aug_kinds[idx], policy, rng)
            loss, grads = loss_and_grad(model, batch, labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged: loss={loss} at step {state.step} "
                    f"(lr={schedule.lr_at(state.step):.4g})"
                )
            sgd_step(model, grads, state)
            total += loss * len(idx)
        model.check_finite()
        epoch_losses.append(total / n)
    return epoch_losses


def _augment_batch(batch, kinds, policy, rng):
    if (kinds == AUG_NONE).all():
        return batch
    out = batch.copy()
    for i, kind in enumerate(kinds):
        if kind == AUG_FULL:
            out[i] = augment(batch[i], policy, sample_draw(policy, rng))
        elif kind == AUG_FLIP_ONLY:
            # Crop-free draw: flips keep the block grid aligned, crops do not.
            draw = sample_draw(policy, rng)
            if draw.flip:
                out[i] = batch[i, :, :, ::-1]
    return out


def predict_labels(
    model: Model, images: np.ndarray, batch_size: int = 512
) -> np.ndarray:
    """Argmax class predictions; ties resolve to the lowest class index."""
    parts = []
    for lo in range(0, len(images), batch_size):
        logits = model.forward(images[lo : lo + batch_size])
        parts.append(np.argmax(logits, axis=1))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def accuracy(model: Model, dataset, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions over a labeled dataset."""
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy undefined on an empty dataset")
    predicted = predict_labels(model, dataset.images, batch_size=batch_size)
    return float((predicted == dataset.labels).mean())
