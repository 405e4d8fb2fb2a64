"""blockmark: watermark image classifiers with a secret block-wise pixel code.

The toolkit trains a CNN so that images rewritten by a keyed block-wise
negative/positive transform keep their original labels. Ownership is then
checked by measuring how often the model gives the same label to an image
and to its transformed twin; only the holder of the secret key can steer
that agreement above chance.

Subpackages and modules:
    keygen      secret key generation, fingerprinting, serialization
    transform   the keyed block-wise pixel transform
    data        dataset loading, synthesis, subsetting, augmentation
    nn          from-scratch numpy layers, model container, SGD training
    watermark   embedding (co-training) and verification
    attacks     magnitude pruning and forged-key fine-tuning
    experiments grid runners that produce result tables and plots
    cli         command-line entry points

Attributes are loaded lazily so that importing the package (for example to
run the CLI's argument parsing) does not pull in numpy; the CLI relies on
this to pin thread counts before any numeric code loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # errors (stdlib-only module)
    "BlockmarkError": ".errors",
    "DataError": ".errors",
    "DigestMismatchError": ".errors",
    "DivisibilityError": ".errors",
    "EmptyDatasetError": ".errors",
    "MalformedFileError": ".errors",
    "PixelRangeError": ".errors",
    "ShapeMismatchError": ".errors",
    "UnsupportedVersionError": ".errors",
    # keygen
    "SecretKey": ".keygen",
    "generate_key": ".keygen",
    "key_distance": ".keygen",
    "load_key": ".keygen",
    "save_key": ".keygen",
    # transform
    "transform": ".transform",
    "transform_array": ".transform",
    "transform_batch": ".transform",
    # data
    "AugmentationPolicy": ".data",
    "LabeledDataset": ".data",
    "augment": ".data",
    "load_cifar10": ".data",
    "load_raw_dataset": ".data",
    "save_cifar10": ".data",
    "save_raw_dataset": ".data",
    "subset": ".data",
    "synthetic_dataset": ".data",
    # nn
    "Model": ".nn",
    "TrainSettings": ".nn",
    "accuracy": ".nn",
    "load_model": ".nn",
    "predict_labels": ".nn",
    "save_model": ".nn",
    # watermark
    "EmbedConfig": ".watermark",
    "VerificationReport": ".watermark",
    "detection_accuracy": ".watermark",
    "embed": ".watermark",
    "train_plain": ".watermark",
    "verify": ".watermark",
    # attacks
    "FinetuneAttackSpec": ".attacks",
    "PruneSpec": ".attacks",
    "finetune_attack": ".attacks",
    "prune": ".attacks",
    "pruning_sweep": ".attacks",
    # experiments
    "ExperimentConfig": ".experiments",
    "ResultsTable": ".experiments",
    "emit_report": ".experiments",
    "resolve_dataset": ".experiments",
    "run_blocksize_grid": ".experiments",
    "run_finetune_grid": ".experiments",
    "run_prune_sweep": ".experiments",
}

__all__ = ["__version__", *sorted(_EXPORTS)]


def __getattr__(name: str):
    try:
        module = import_module(_EXPORTS[name], __name__)
    except KeyError:
        raise AttributeError(
            f"module {__name__!r} has no attribute {name!r}"
        ) from None
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
