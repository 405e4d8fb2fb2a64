"""Pruning and fine-tuning attacks."""

import numpy as np
import pytest

from blockmark.attacks import (
    FinetuneAttackSpec,
    PruneSpec,
    finetune_attack,
    prune,
    pruning_sweep,
)
from blockmark.data import synthetic_dataset
from blockmark.errors import EmptyDatasetError
from blockmark.keygen import generate_key
from blockmark.nn.model import Model
from blockmark.nn.train import default_architecture
from blockmark.watermark import EmbedConfig, embed
from helpers_prune import (
    StubModel,
    instance_agrees,
    oracle_prune,
    random_prune_instance,
)

TINY = EmbedConfig(
    epochs=2, batch_size=32, model_width=4, model_batchnorm=False,
    augment_pad=0,
)


@pytest.fixture(scope="module")
def victim():
    train = synthetic_dataset(seed=0, n=64, classes=4, shape=(3, 8, 8), variants=4)
    test = synthetic_dataset(seed=9, n=32, classes=4, shape=(3, 8, 8), variants=4)
    key = generate_key(seed=1, block_size=2, channels=3)
    model = embed(train, key, TINY)
    return train, test, key, model


# -- pruning -----------------------------------------------------------------


def test_prune_spec_validation():
    with pytest.raises(ValueError):
        PruneSpec(rate=-0.1)
    with pytest.raises(ValueError):
        PruneSpec(rate=1.0001)
    PruneSpec(rate=0.0)
    PruneSpec(rate=1.0)


def test_prune_matches_oracle_randomized():
    rng = np.random.default_rng(42)
    for _ in range(25):
        params, scope, rate = random_prune_instance(rng)
        assert instance_agrees(params, scope, rate)


def test_prune_tie_break_is_scope_then_flat_order():
    # Four equal magnitudes across two tensors; quota of two must take the
    # first tensor's entries in flat order and leave the second untouched.
    params = {
        "a.weight": np.array([0.5, -0.5], dtype=np.float32),
        "b.weight": np.array([-0.5, 0.5], dtype=np.float32),
    }
    got = prune(StubModel(params), PruneSpec(rate=0.5, scope=("a.weight", "b.weight")))
    assert got.params["a.weight"].tolist() == [0.0, 0.0]
    assert got.params["b.weight"].tolist() == [-0.5, 0.5]
    # Scope order reversed: now tensor b is zeroed first.
    got = prune(StubModel(params), PruneSpec(rate=0.5, scope=("b.weight", "a.weight")))
    assert got.params["b.weight"].tolist() == [0.0, 0.0]
    assert got.params["a.weight"].tolist() == [0.5, -0.5]


def test_prune_quota_uses_floor():
    params = {"w.weight": np.array([1.0, 2.0, 3.0], dtype=np.float32)}
    # rate 0.5 of 3 weights -> floor(1.5) = 1 zeroed.
    got = prune(StubModel(params), PruneSpec(rate=0.5))
    assert got.params["w.weight"].tolist() == [0.0, 2.0, 3.0]
    # rate just below 1/3 -> floor(0.999) = 0 zeroed.
    got = prune(StubModel(params), PruneSpec(rate=0.333))
    assert got.params["w.weight"].tolist() == [1.0, 2.0, 3.0]


def test_prune_nesting_across_rates():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params, scope, _ = random_prune_instance(rng)
        low = oracle_prune(params, scope, 0.3)
        high = oracle_prune(params, scope, 0.7)
        for name in scope:
            newly_zero_low = (low[name] == 0) & (params[name] != 0)
            newly_zero_high = (high[name] == 0) & (params[name] != 0)
            assert (newly_zero_low <= newly_zero_high).all()


def test_prune_idempotent_at_same_rate():
    rng = np.random.default_rng(3)
    params, scope, _ = random_prune_instance(rng)
    once = prune(StubModel(params), PruneSpec(rate=0.4, scope=tuple(scope)))
    twice = prune(once, PruneSpec(rate=0.4, scope=tuple(scope)))
    for name in scope:
        assert np.array_equal(once.params[name], twice.params[name])


def test_prune_on_real_model_leaves_biases(victim):
    _, _, _, model = victim
    pruned = prune(model, PruneSpec(rate=0.9))
    for name in model.prunable_weight_names():
        before = int((model.params[name] == 0).sum())
        after = int((pruned.params[name] == 0).sum())
        assert after > before
    for name in model.params:
        if name not in model.prunable_weight_names():
            assert np.array_equal(pruned.params[name], model.params[name])
    # Input model untouched.
    assert model.digest() != pruned.digest()
    assert pruned.metadata == model.metadata


def test_prune_rate_one_zeroes_everything(victim):
    _, _, _, model = victim
    pruned = prune(model, PruneSpec(rate=1.0))
    for name in model.prunable_weight_names():
        assert (pruned.params[name] == 0).all()


def test_prune_scope_validation(victim):
    _, _, _, model = victim
    with pytest.raises(KeyError):
        prune(model, PruneSpec(rate=0.5, scope=("nope.weight",)))
    arch = [
        {"kind": "flatten"},
    ]
    bare = Model.initialize(arch, seed=0)
    with pytest.raises(ValueError, match="scope is empty"):
        prune(bare, PruneSpec(rate=0.5))


# -- pruning sweep -----------------------------------------------------------


def test_pruning_sweep_rows(victim):
    _, test, key, model = victim
    rows = pruning_sweep(model, key, test, rates=[0.0, 0.5])
    assert [row["rate"] for row in rows] == [0.0, 0.5]
    for row in rows:
        assert set(row) == {"rate", "accuracy", "tau"}
        assert 0.0 <= row["accuracy"] <= 1.0
        assert 0.0 <= row["tau"] <= 1.0
    # Rate 0 must reproduce the unpruned model's metrics exactly.
    from blockmark.nn import accuracy as model_accuracy
    from blockmark.watermark import detection_accuracy

    assert rows[0]["accuracy"] == model_accuracy(model, test)
    assert rows[0]["tau"] == detection_accuracy(model, test, key)[0]


def test_pruning_sweep_validation(victim):
    _, test, key, model = victim
    with pytest.raises(ValueError):
        pruning_sweep(model, key, test, rates=[0.5, 0.3])
    with pytest.raises(ValueError):
        pruning_sweep(model, key, test, rates=[0.0, 1.5])
    import dataclasses

    empty = dataclasses.replace(test, images=test.images[:0], labels=test.labels[:0])
    with pytest.raises(EmptyDatasetError):
        pruning_sweep(model, key, empty, rates=[0.0])


# -- fine-tuning attack ------------------------------------------------------


def test_finetune_attack_spec_validation(victim):
    _, _, key, _ = victim
    with pytest.raises(ValueError):
        FinetuneAttackSpec(forged_key=key, subset_size=0)
    with pytest.raises(ValueError):
        FinetuneAttackSpec(forged_key=key, subset_size=10, epochs=0)


def test_finetune_attack_runs_and_annotates(victim):
    train, _, key, model = victim
    forged = generate_key(seed=2, block_size=2, channels=3)
    spec = FinetuneAttackSpec(
        forged_key=forged, subset_size=16, subset_seed=3, epochs=2, config=TINY,
    )
    attacked = finetune_attack(model, train, spec)
    note = attacked.metadata["finetune_attack"]
    assert note["subset_size"] == 16
    assert note["forged_key_fingerprint"] == forged.fingerprint
    assert attacked.metadata["key_fingerprint"] == forged.fingerprint
    # The original is untouched and the attack actually changed weights.
    assert "finetune_attack" not in model.metadata
    assert attacked.digest() != model.digest()
    # Deterministic: same spec, same result.
    again = finetune_attack(model, train, spec)
    assert again.digest() == attacked.digest()


def test_finetune_attack_validates_subset_size(victim):
    train, _, key, model = victim
    spec = FinetuneAttackSpec(forged_key=key, subset_size=len(train) + 1, config=TINY)
    with pytest.raises(ValueError, match="exceeds dataset size"):
        finetune_attack(model, train, spec)
