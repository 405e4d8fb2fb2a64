"""Attacks against the watermark: magnitude pruning and key forgery by fine-tuning.

Pruning zeroes the globally smallest-magnitude weights of conv and dense
layers (biases and normalization parameters are out of scope), the standard
compression an adversary might apply to degrade a watermark. The fine-tuning
attack models piracy: retrain a stolen model on a small data subset with a
forged key, trying to overwrite the embedded watermark with a new one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, subset
from .errors import EmptyDatasetError
from .keygen import SecretKey
from .nn import Model, accuracy
from .watermark import EmbedConfig, detection_accuracy, embed


@dataclass(frozen=True)
class PruneSpec:
    """Global magnitude-pruning recipe.

    `scope` lists the parameter tensors eligible for zeroing; None means all
    conv/dense weights of the model. Ranking is global across the scope:
    the floor(rate * n) weights of smallest absolute value are zeroed, ties
    at the cutoff broken by scope order then flat index, so the zeroed set
    for a smaller rate is always a subset of that for a larger one.
    """

    rate: float
    scope: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"pruning rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class FinetuneAttackSpec:
    """Piracy attempt: re-embed with a forged key on a small data subset."""

    forged_key: SecretKey
    subset_size: int
    subset_seed: int = 0
    epochs: int = 30
    stratified: bool = True
    config: EmbedConfig | None = None

    def __post_init__(self):
        if self.subset_size < 1:
            raise ValueError("subset_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def prune(model: Model, spec: PruneSpec) -> Model:
    """Copy `model` with the smallest-magnitude scoped weights set to zero."""
    scope = list(spec.scope) if spec.scope is not None else model.prunable_weight_names()
    if not scope:
        raise ValueError("pruning scope is empty")
    for name in scope:
        if name not in model.params:
            raise KeyError(f"scoped tensor {name!r} not in model parameters")
    pruned = model.copy()
    magnitudes = np.concatenate(
        [np.abs(pruned.params[name].ravel()) for name in scope]
    )
    tensor_idx = np.concatenate(
        [np.full(pruned.params[name].size, i) for i, name in enumerate(scope)]
    )
    flat_idx = np.concatenate(
        [np.arange(pruned.params[name].size) for name in scope]
    )
    quota = int(np.floor(spec.rate * magnitudes.size))
    if quota == 0:
        return pruned
    # lexsort: magnitude first, then scope order, then position within tensor.
    order = np.lexsort((flat_idx, tensor_idx, magnitudes))
    chosen = order[:quota]
    for i, name in enumerate(scope):
        mask = (tensor_idx[chosen] == i)
        if mask.any():
            flat = pruned.params[name].ravel()
            flat[flat_idx[chosen][mask]] = 0
    return pruned


def finetune_attack(
    model: Model, dataset: LabeledDataset, spec: FinetuneAttackSpec
) -> Model:
    """Run the embedding procedure with a forged key on a data subset.

    Returns the attacked model; the input model is not modified.
    """
    if spec.subset_size > len(dataset):
        raise ValueError(
            f"subset_size {spec.subset_size} exceeds dataset size {len(dataset)}"
        )
    attacker_data = subset(
        dataset, spec.subset_size, seed=spec.subset_seed, stratified=spec.stratified
    )
    base = spec.config if spec.config is not None else EmbedConfig()
    config = EmbedConfig(
        epochs=spec.epochs,
        batch_size=min(base.batch_size, spec.subset_size),
        mode=base.mode,
        train_seed=base.train_seed,
        max_lr=base.max_lr,
        momentum=base.momentum,
        weight_decay=base.weight_decay,
        warmup_frac=base.warmup_frac,
        augment=base.augment,
        augment_pad=base.augment_pad,
        augment_transformed=base.augment_transformed,
    )
    attacked = embed(attacker_data, spec.forged_key, config, initial_model=model)
    attacked.metadata["finetune_attack"] = {
        "subset_size": spec.subset_size,
        "subset_seed": spec.subset_seed,
        "epochs": spec.epochs,
        "forged_key_fingerprint": spec.forged_key.fingerprint,
    }
    return attacked


def pruning_sweep(
    model: Model,
    key: SecretKey,
    test_set: LabeledDataset,
    rates,
) -> list[dict]:
    """Prune a fresh copy at each rate; report accuracy and detection tau.

    `rates` must be sorted ascending within [0, 1]. Returns one row per rate:
    {"rate", "accuracy", "tau"}.
    """
    rates = [float(r) for r in rates]
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("pruning rates must lie in [0, 1]")
    if rates != sorted(rates):
        raise ValueError("pruning rates must be sorted ascending")
    if len(test_set) == 0:
        raise EmptyDatasetError("pruning sweep needs a non-empty test set")
    rows = []
    for rate in rates:
        pruned = prune(model, PruneSpec(rate=rate))
        tau, _ = detection_accuracy(pruned, test_set.images, key)
        rows.append(
            {
                "rate": rate,
                "accuracy": accuracy(pruned, test_set),
                "tau": tau,
            }
        )
    return rows
