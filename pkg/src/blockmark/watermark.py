"""Watermark embedding and ownership verification.

Embedding co-trains a classifier on every training image twice per epoch:
once as-is and once passed through the keyed block-wise transform, with the
original label both times. The model then classifies plain and key-
transformed inputs consistently, and that agreement is the watermark.

Verification needs no special trigger set: for any in-distribution test
images, ``tau`` is the fraction whose predicted label matches between the
plain image and its transformed counterpart. Ownership is declared when
``tau`` strictly exceeds the inspector's threshold.
"""

from __future__ import annotations

import datetime
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import EmptyDatasetError
from .keygen import SecretKey
from .nn import Model, TrainSettings, default_architecture, predict_labels, train_model
from .nn.train import AUG_FLIP_ONLY, AUG_FULL, AUG_NONE
from .transform import transform_array

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EmbedConfig:
    """Training recipe for watermark embedding.

    `mode` selects how the plain set X and transformed set X' are combined:
    "joint" draws shuffled minibatches from their union every epoch (each
    image appears once plain and once transformed per epoch); "sequential"
    trains to completion on X and then again on X'. Sequential runs risk
    forgetting the first set, so joint is the default.

    Transformed copies are never crop-augmented: a shifted crop would break
    the alignment between image blocks and the key pattern.
    `augment_transformed="flip"` allows horizontal flips of transformed
    copies; "none" leaves them untouched. `augment_pad` sets the crop
    padding for plain copies; 0 degenerates to flip-only, which suits small
    images whose content cannot survive large shifts.
    """

    epochs: int = 30
    batch_size: int = 128
    mode: str = "joint"
    train_seed: int = 0
    max_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_frac: float = 0.3
    augment: bool = True
    augment_pad: int = 4
    augment_transformed: str = "none"
    architecture: tuple | None = None
    model_width: int = 16
    model_batchnorm: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("joint", "sequential"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.augment_pad < 0:
            raise ValueError("augment_pad must be >= 0")
        if self.augment_transformed not in ("none", "flip"):
            raise ValueError(
                f"augment_transformed must be 'none' or 'flip', "
                f"got {self.augment_transformed!r}"
            )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            max_lr=self.max_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            seed=self.train_seed,
            augment_pad=self.augment_pad,
        )


@dataclass
class VerificationReport:
    """Self-contained record of one ownership check."""

    tau: float
    threshold: float
    verdict: str
    sample_count: int
    agreements: np.ndarray
    key_fingerprint: str
    model_digest: str
    seeds: dict
    timestamp: str
    tau_ci95: tuple[float, float] = (0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "tau": self.tau,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "s": self.sample_count,
            "agreements": [int(a) for a in self.agreements],
            "key_fingerprint": self.key_fingerprint,
            "model_digest": self.model_digest,
            "seeds": self.seeds,
            "timestamp": self.timestamp,
            "tau_ci95": list(self.tau_ci95),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if trials == 0:
        return (0.0, 1.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    return (max(0.0, center - half), min(1.0, center + half))


def embed(
    dataset: LabeledDataset,
    key: SecretKey,
    config: EmbedConfig,
    initial_model: Model | None = None,
) -> Model:
    """Train a watermarked classifier on `dataset` with `key`.

    Starts from `initial_model` when given (fine-tuning), otherwise from a
    fresh default architecture. The returned model's metadata records the
    key fingerprint and seeds, never the key bits.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot embed into an empty dataset")
    transformed = transform_array(dataset.images, key)
    if initial_model is not None:
        model = initial_model.copy()
    else:
        architecture = (
            [dict(s) for s in config.architecture]
            if config.architecture is not None
            else default_architecture(
                dataset.image_shape,
                dataset.num_classes,
                width=config.model_width,
                batchnorm=config.model_batchnorm,
            )
        )
        model = Model.initialize(architecture, seed=config.train_seed)
    plain_kind = AUG_FULL if config.augment else AUG_NONE
    transformed_kind = (
        AUG_FLIP_ONLY if config.augment_transformed == "flip" else AUG_NONE
    )
    settings = config.train_settings()
    if config.mode == "joint":
        images = np.concatenate([dataset.images, transformed])
        labels = np.concatenate([dataset.labels, dataset.labels])
        kinds = np.concatenate(
            [
                np.full(len(dataset), plain_kind, dtype=np.int8),
                np.full(len(dataset), transformed_kind, dtype=np.int8),
            ]
        )
        train_model(model, images, labels, settings, aug_kinds=kinds)
    else:
        train_model(
            model, dataset.images, dataset.labels, settings,
            aug_kinds=np.full(len(dataset), plain_kind, dtype=np.int8),
        )
        train_model(
            model, transformed, dataset.labels, settings,
            aug_kinds=np.full(len(dataset), transformed_kind, dtype=np.int8),
        )
    model.metadata.update(
        {
            "watermarked": True,
            "key_fingerprint": key.fingerprint,
            "block_size": key.block_size,
            "embed_mode": config.mode,
            "train_seed": config.train_seed,
            "epochs": config.epochs,
        }
    )
    return model


def train_plain(dataset: LabeledDataset, config: EmbedConfig) -> Model:
    """Ordinary training without any watermark, for baselines.

    Uses the same architecture, schedule, and augmentation recipe as
    `embed`, so embedded and plain models differ only in the co-trained
    transformed images.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    architecture = (
        [dict(s) for s in config.architecture]
        if config.architecture is not None
        else default_architecture(
            dataset.image_shape,
            dataset.num_classes,
            width=config.model_width,
            batchnorm=config.model_batchnorm,
        )
    )
    model = Model.initialize(architecture, seed=config.train_seed)
    kind = AUG_FULL if config.augment else AUG_NONE
    train_model(
        model,
        dataset.images,
        dataset.labels,
        config.train_settings(),
        aug_kinds=np.full(len(dataset), kind, dtype=np.int8),
    )
    model.metadata.update(
        {
            "watermarked": False,
            "train_seed": config.train_seed,
            "epochs": config.epochs,
        }
    )
    return model


def detection_accuracy(
    model: Model, test_images, key: SecretKey
) -> tuple[float, np.ndarray]:
    """Label-agreement rate between plain and key-transformed predictions.

    `test_images` may be a LabeledDataset or a (n, c, h, w) array; labels are
    not used. Returns (tau, per-image 0/1 agreement vector).
    """
    images = getattr(test_images, "images", test_images)
    images = np.asarray(images)
    if len(images) == 0:
        raise EmptyDatasetError("detection needs at least one test image")
    transformed = transform_array(images, key)
    plain_pred = predict_labels(model, images)
    transformed_pred = predict_labels(model, transformed)
    agreements = (plain_pred == transformed_pred).astype(np.uint8)
    return float(agreements.mean()), agreements


def verify(
    model: Model,
    test_images,
    key: SecretKey,
    threshold: float = 0.5,
    seeds: dict | None = None,
) -> VerificationReport:
    """Run the detection statistic and judge ownership against `threshold`.

    The verdict is "Successful" iff tau strictly exceeds the threshold.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    tau, agreements = detection_accuracy(model, test_images, key)
    report_seeds = {"key_seed": key.seed}
    if "train_seed" in model.metadata:
        report_seeds["train_seed"] = model.metadata["train_seed"]
    report_seeds.update(seeds or {})
    return VerificationReport(
        tau=tau,
        threshold=float(threshold),
        verdict="Successful" if tau > threshold else "Unsuccessful",
        sample_count=int(agreements.size),
        agreements=agreements,
        key_fingerprint=key.fingerprint,
        model_digest=model.digest(),
        seeds=report_seeds,
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        tau_ci95=_wilson_interval(int(agreements.sum()), int(agreements.size)),
    )
