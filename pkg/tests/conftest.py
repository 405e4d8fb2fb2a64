"""Shared fixtures.

Thread pinning happens at import time, before numpy loads anywhere in the
test process, so every numeric result in the suite is reproducible on any
machine regardless of its core count.

The expensive session fixtures (a trained plain baseline and a trained
watermarked model on the standard desk-scale synthetic dataset) are shared
by several end-to-end checks; `fixture_seconds` records how long each took
to build so time budgets can be accounted honestly wherever the fixture is
reused.
"""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import time
from pathlib import Path

import pytest

from blockmark.experiments import ExperimentConfig, resolve_dataset
from blockmark.keygen import generate_key
from blockmark.watermark import embed, train_plain

TESTS_DIR = Path(__file__).resolve().parent
GOLDEN_FILE = TESTS_DIR / "data" / "blockwise_golden_v1.txt"

# Desk-scale recipe: every field not listed keeps the package default
# (synthetic 2000/512 images, 10 classes, 3x16x16, 30 epochs, batch 128,
# max_lr 0.2, width 16, key seeds 1/2, train seed 0, threshold 0.5).
DESK_OVERRIDES = dict(block_sizes=(2,), model_batchnorm=False, augment_pad=0)


@pytest.fixture(scope="session")
def desk_config() -> ExperimentConfig:
    return ExperimentConfig(**DESK_OVERRIDES)


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return resolve_dataset(desk_config.dataset)


@pytest.fixture(scope="session")
def desk_keys(desk_config):
    m = desk_config.block_sizes[0]
    channels = 3
    return (
        generate_key(desk_config.key_seed, m, channels),
        generate_key(desk_config.forged_key_seed, m, channels),
    )


@pytest.fixture(scope="session")
def fixture_seconds() -> dict:
    return {}


@pytest.fixture(scope="session")
def baseline_model(desk_config, desk_data, fixture_seconds):
    start = time.perf_counter()
    model = train_plain(desk_data[0], desk_config.embed_config())
    fixture_seconds["baseline_model"] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def embedded_model(desk_config, desk_data, desk_keys, fixture_seconds):
    start = time.perf_counter()
    model = embed(desk_data[0], desk_keys[0], desk_config.embed_config())
    fixture_seconds["embedded_model"] = time.perf_counter() - start
    return model
