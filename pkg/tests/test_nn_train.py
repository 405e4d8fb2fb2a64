"""Optimizer recurrence, learning-rate schedule, architecture, training loop."""

import numpy as np
import pytest

from blockmark.data import LabeledDataset
from blockmark.errors import EmptyDatasetError, ShapeMismatchError
from blockmark.nn.model import Model
from blockmark.nn.optim import OneCycleSchedule, init_optimizer, sgd_step
from blockmark.nn.train import (
    TrainSettings,
    accuracy,
    default_architecture,
    predict_labels,
    train_model,
)

TINY_DENSE = [{"kind": "dense", "name": "d", "in_features": 3, "out_features": 2}]


def test_sgd_matches_hand_recurrence():
    # v <- m*v + (g + wd*theta); theta <- theta - lr*v, verified exactly
    # over several steps against an independent reimplementation.
    model = Model.initialize(TINY_DENSE, seed=0, dtype=np.float64)
    schedule = OneCycleSchedule(total_steps=5, max_lr=0.1)
    momentum, wd = 0.9, 0.01
    state = init_optimizer(model, schedule, momentum=momentum, weight_decay=wd)

    mirror = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in mirror.items()}
    rng = np.random.default_rng(1)
    for step in range(5):
        grads = {k: rng.normal(size=v.shape) for k, v in mirror.items()}
        sgd_step(model, grads, state)
        lr = schedule.lr_at(step)
        for k in mirror:
            velocity[k] = momentum * velocity[k] + (grads[k] + wd * mirror[k])
            mirror[k] = mirror[k] - lr * velocity[k]
            assert np.array_equal(model.params[k], mirror[k]), (step, k)
    assert state.step == 5


def test_sgd_validates_gradients():
    model = Model.initialize(TINY_DENSE, seed=0, dtype=np.float64)
    state = init_optimizer(model, OneCycleSchedule(total_steps=2))
    good = {k: np.zeros_like(v) for k, v in model.params.items()}
    with pytest.raises(ShapeMismatchError):
        sgd_step(model, {"d.weight": good["d.weight"]}, state)
    bad_shape = dict(good)
    bad_shape["d.bias"] = np.zeros((3,))
    with pytest.raises(ShapeMismatchError):
        sgd_step(model, bad_shape, state)
    bad_value = {k: v.copy() for k, v in good.items()}
    bad_value["d.weight"][0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        sgd_step(model, bad_value, state)


def test_one_cycle_shape():
    sched = OneCycleSchedule(
        total_steps=101, max_lr=0.2, warmup_frac=0.3,
        div_factor=10.0, final_div_factor=100.0,
    )
    lrs = [sched.lr_at(s) for s in range(101)]
    assert lrs[0] == pytest.approx(0.02)          # max_lr / div
    assert max(lrs) == pytest.approx(0.2)
    assert lrs.index(max(lrs)) == sched.peak_step == 30
    assert lrs[-1] == pytest.approx(0.02 / 100)   # initial / final_div
    # Monotone up to the peak, monotone down after.
    assert all(a < b for a, b in zip(lrs[:30], lrs[1:31]))
    assert all(a > b for a, b in zip(lrs[30:-1], lrs[31:]))
    assert all(lr > 0 for lr in lrs)


def test_one_cycle_tiny_and_invalid():
    one = OneCycleSchedule(total_steps=1, max_lr=0.5)
    assert one.lr_at(0) == 0.5  # peak collapses onto the only step
    with pytest.raises(ValueError):
        one.lr_at(1)
    with pytest.raises(ValueError):
        one.lr_at(-1)
    with pytest.raises(ValueError):
        OneCycleSchedule(total_steps=0)
    with pytest.raises(ValueError):
        OneCycleSchedule(total_steps=10, max_lr=-1.0)
    with pytest.raises(ValueError):
        OneCycleSchedule(total_steps=10, warmup_frac=1.0)


def test_default_architecture_layout():
    arch = default_architecture((3, 16, 16), num_classes=10, width=16)
    kinds = [spec["kind"] for spec in arch]
    assert kinds == ["conv", "batchnorm", "relu", "maxpool",
                     "conv", "batchnorm", "relu", "maxpool",
                     "flatten", "dense"]
    fc = arch[-1]
    assert fc["in_features"] == 32 * 4 * 4
    assert fc["out_features"] == 10

    plain = default_architecture((3, 16, 16), num_classes=10, batchnorm=False)
    assert [s["kind"] for s in plain] == ["conv", "relu", "maxpool",
                                          "conv", "relu", "maxpool",
                                          "flatten", "dense"]
    with pytest.raises(ValueError):
        default_architecture((3, 10, 10), num_classes=10)


def test_model_initialize_is_reproducible():
    arch = default_architecture((3, 8, 8), num_classes=4, width=4)
    a = Model.initialize(arch, seed=3)
    b = Model.initialize(arch, seed=3)
    c = Model.initialize(arch, seed=4)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert any(
        not np.array_equal(a.params[name], c.params[name]) for name in a.params
    )
    assert a.params["conv1.weight"].dtype == np.float32


def test_train_model_learns_separable_data():
    # Class 1 images are bright, class 0 images are dark: linearly
    # separable through a flatten + dense stack.
    rng = np.random.default_rng(0)
    n = 128
    labels = np.arange(n) % 2
    images = (0.3 + 0.4 * labels[:, None, None, None]
              + 0.05 * rng.normal(size=(n, 1, 2, 2))).astype(np.float32)
    images = images.clip(0.0, 1.0)
    arch = [
        {"kind": "flatten"},
        {"kind": "dense", "name": "d", "in_features": 4, "out_features": 2},
    ]
    model = Model.initialize(arch, seed=0)
    losses = train_model(
        model, images, labels,
        TrainSettings(epochs=10, batch_size=32, max_lr=0.05, augment_pad=0,
                      flip_prob=0.0),
    )
    assert len(losses) == 10
    assert losses[-1] < losses[0] / 2
    predicted = predict_labels(model, images)
    assert (predicted == labels).mean() > 0.95


def test_train_model_determinism():
    rng = np.random.default_rng(7)
    images = rng.random((32, 3, 8, 8), dtype=np.float32)
    labels = rng.integers(0, 4, size=32)
    arch = default_architecture((3, 8, 8), num_classes=4, width=4)
    settings = TrainSettings(epochs=2, batch_size=16, seed=5)
    run = []
    for _ in range(2):
        model = Model.initialize(arch, seed=1)
        losses = train_model(model, images.copy(), labels, settings)
        run.append((losses, {k: v.copy() for k, v in model.params.items()}))
    assert run[0][0] == run[1][0]
    for k in run[0][1]:
        assert np.array_equal(run[0][1][k], run[1][1][k])


def test_train_model_rejects_empty():
    model = Model.initialize(TINY_DENSE, seed=0)
    with pytest.raises(EmptyDatasetError):
        train_model(model, np.zeros((0, 3)), np.zeros(0, dtype=int),
                    TrainSettings(epochs=1))


def test_accuracy_and_prediction_ties():
    # A model with all-zero weights emits identical logits; argmax must
    # resolve to class 0 deterministically.
    arch = [
        {"kind": "flatten"},
        {"kind": "dense", "name": "d", "in_features": 12, "out_features": 2},
    ]
    model = Model.initialize(arch, seed=0, dtype=np.float64)
    for name in model.params:
        model.params[name][:] = 0.0
    images = np.ones((5, 3, 2, 2))
    assert predict_labels(model, images).tolist() == [0] * 5
    ds = LabeledDataset(
        np.ones((4, 3, 2, 2), dtype=np.float32),
        np.array([0, 0, 1, 1]),
        num_classes=2,
    )
    assert accuracy(model, ds) == 0.5
    with pytest.raises(EmptyDatasetError):
        accuracy(model, LabeledDataset(
            np.zeros((0, 3, 2, 2), dtype=np.float32),
            np.zeros(0, dtype=np.int64), num_classes=2))