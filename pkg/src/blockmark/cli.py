"""Command-line interface.

Subcommands:
    keygen           generate and save a secret key
    transform        rewrite a dataset with a key, same container format
    train            train a classifier, watermarked when a key is given
    verify           check model ownership against a key
    attack-prune     zero the smallest weights of a saved model
    attack-finetune  re-embed a forged key on a data subset
    exp-table1       block-size grid: baseline + one embedded model per M
    exp-finetune     fine-tuning attack grid over subset sizes
    exp-prune        pruning sweep over rates
    report           re-emit table files (csv, summary, plot) from a table

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification gate
failed (`verify --gate` with an Unsuccessful verdict).

Heavy imports happen inside handlers so that `--deterministic` can pin
thread counts before numpy loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .errors import BlockmarkError, DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_GATE = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this harness promises 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_deterministic() -> None:
    if "numpy" in sys.modules:
        print(
            "warning: numpy already imported; thread pinning may not take effect",
            file=sys.stderr,
        )
    for var in _THREAD_VARS:
        os.environ[var] = "1"


# ---------------------------------------------------------------------------
# config file and experiment config assembly


def _read_config_file(path) -> dict:
    """Parse a plain-text key=value override file. '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    entries = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        entries[name.strip()] = value.strip()
    return entries


def _coerce(name: str, text: str, example):
    """Convert config-file text to the type of an ExperimentConfig default."""
    if isinstance(example, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name} expects a boolean, got {text!r}")
    if isinstance(example, int):
        return int(text)
    if isinstance(example, float):
        return float(text)
    if isinstance(example, tuple):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        inner = example[0] if example else 0
        return tuple(float(p) if isinstance(inner, float) else int(p) for p in parts)
    return text


def _experiment_config(args) -> "ExperimentConfig":
    from .experiments import ExperimentConfig

    values = {}
    if args.config:
        fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
        defaults = ExperimentConfig()
        for name, text in _read_config_file(args.config).items():
            if name not in fields:
                raise ValueError(
                    f"unknown config key {name!r}; valid keys: "
                    + ", ".join(sorted(fields))
                )
            values[name] = _coerce(name, text, getattr(defaults, name))
    flag_map = {
        "data": "dataset",
        "block_sizes": "block_sizes",
        "key_seed": "key_seed",
        "forged_key_seed": "forged_key_seed",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "max_lr": "max_lr",
        "width": "model_width",
        "threshold": "threshold",
        "subset_sizes": "subset_sizes",
        "finetune_epochs": "finetune_epochs",
        "prune_rates": "prune_rates",
        "augment_pad": "augment_pad",
    }
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[field] = value
    if getattr(args, "seed", None) is not None:
        values["train_seed"] = args.seed
    if getattr(args, "batchnorm", None) is not None:
        values["model_batchnorm"] = args.batchnorm
    return ExperimentConfig(**values)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _out_dir(args, default: str) -> Path:
    return Path(args.out_dir) if args.out_dir else Path(default)


# ---------------------------------------------------------------------------
# small shared helpers


def _load_dataset_pair(spec: str):
    from .experiments import resolve_dataset

    return resolve_dataset(spec)


def _embed_config_from(args) -> "EmbedConfig":
    from .watermark import EmbedConfig

    kwargs = {}
    if getattr(args, "epochs", None) is not None:
        kwargs["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        kwargs["batch_size"] = args.batch_size
    if getattr(args, "max_lr", None) is not None:
        kwargs["max_lr"] = args.max_lr
    if getattr(args, "mode", None) is not None:
        kwargs["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        kwargs["train_seed"] = args.seed
    if getattr(args, "width", None) is not None:
        kwargs["model_width"] = args.width
    if getattr(args, "batchnorm", None) is not None:
        kwargs["model_batchnorm"] = args.batchnorm
    if getattr(args, "augment_pad", None) is not None:
        kwargs["augment_pad"] = args.augment_pad
    if getattr(args, "no_augment", False):
        kwargs["augment"] = False
    if getattr(args, "augment_transformed", None) is not None:
        kwargs["augment_transformed"] = args.augment_transformed
    return EmbedConfig(**kwargs)


# ---------------------------------------------------------------------------
# handlers


def _cmd_keygen(args) -> int:
    from .keygen import generate_key, save_key

    key = generate_key(
        seed=args.seed if args.seed is not None else 0,
        block_size=args.block_size,
        channels=args.channels,
    )
    out = Path(args.out) if args.out else _out_dir(args, ".") / "key.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_key(key, out)
    print(f"wrote key: {out}")
    print(f"  block_size={key.block_size} channels={key.channels} bits={key.length}")
    print(f"  fingerprint={key.fingerprint}")
    return EXIT_OK


def _cmd_transform(args) -> int:
    from .data import (
        LabeledDataset,
        load_cifar10,
        load_raw_dataset,
        save_cifar10,
        save_raw_dataset,
    )
    from .keygen import load_key
    from .transform import transform_array

    key = load_key(args.key)
    out = _out_dir(args, "transformed")

    def rewrite(ds: LabeledDataset) -> LabeledDataset:
        return LabeledDataset(
            transform_array(ds.images, key), ds.labels.copy(),
            ds.num_classes, split=ds.split,
        )

    spec = args.data
    path = Path(spec)
    if spec.startswith("cifar:"):
        path = Path(spec.partition(":")[2])
    if (path / "data_batch_1.bin").exists():
        train, test = load_cifar10(path)
        save_cifar10(rewrite(train), rewrite(test), out)
        print(f"wrote transformed batches (binary format): {out}")
    elif (path / "manifest.json").exists():
        save_raw_dataset(rewrite(load_raw_dataset(path)), out)
        print(f"wrote transformed raw-tensor dataset: {out}")
    elif (path / "train" / "manifest.json").exists():
        save_raw_dataset(rewrite(load_raw_dataset(path / "train")), out / "train")
        save_raw_dataset(rewrite(load_raw_dataset(path / "test")), out / "test")
        print(f"wrote transformed raw-tensor datasets: {out}/train, {out}/test")
    else:
        train, test = _load_dataset_pair(spec)
        save_raw_dataset(rewrite(train), out / "train")
        save_raw_dataset(rewrite(test), out / "test")
        print(f"wrote transformed raw-tensor datasets: {out}/train, {out}/test")
    print(f"  key fingerprint: {key.fingerprint}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .keygen import load_key
    from .nn import accuracy, save_model
    from .watermark import detection_accuracy, embed, train_plain

    train, test = _load_dataset_pair(args.data)
    config = _embed_config_from(args)
    if args.key:
        key = load_key(args.key)
        model = embed(train, key, config)
    else:
        key = None
        model = train_plain(train, config)
    out = Path(args.out) if args.out else _out_dir(args, ".") / "model.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    acc = accuracy(model, test)
    print(f"wrote model: {out}")
    print(f"  test accuracy: {acc:.4f} ({100 * acc:.2f}%)")
    if key is not None:
        tau, _ = detection_accuracy(model, test.images, key)
        print(f"  detection rate (tau): {tau:.4f}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .keygen import load_key
    from .nn import load_model
    from .watermark import verify

    model = load_model(args.model)
    key = load_key(args.key)
    _, test = _load_dataset_pair(args.data)
    report = verify(model, test, key, threshold=args.threshold)
    lo, hi = report.tau_ci95
    print(f"tau={report.tau:.4f} threshold={report.threshold:.4f} "
          f"verdict={report.verdict}")
    print(f"  agreements: {int(report.agreements.sum())}/{report.sample_count} "
          f"(95% CI {lo:.4f}..{hi:.4f})")
    print(f"  key fingerprint: {report.key_fingerprint}")
    print(f"  model digest: {report.model_digest}")
    report_path = args.report
    if report_path is None and args.out_dir:
        report_path = Path(args.out_dir) / "report.json"
    if report_path is not None:
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report.save(report_path)
        print(f"  wrote report: {report_path}")
    if args.gate and report.verdict != "Successful":
        return EXIT_GATE
    return EXIT_OK


def _cmd_attack_prune(args) -> int:
    from .attacks import PruneSpec, prune
    from .nn import accuracy, load_model, save_model

    model = load_model(args.model)
    pruned = prune(model, PruneSpec(rate=args.rate))
    out = Path(args.out) if args.out else _out_dir(args, ".") / "pruned.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(pruned, out)
    zeroed = sum(
        int((pruned.params[n] == 0).sum()) - int((model.params[n] == 0).sum())
        for n in pruned.prunable_weight_names()
    )
    print(f"wrote pruned model: {out}")
    print(f"  rate={args.rate} newly zeroed weights: {zeroed}")
    if args.data:
        _, test = _load_dataset_pair(args.data)
        print(f"  test accuracy after: {accuracy(pruned, test):.4f}")
        if args.key:
            from .keygen import load_key
            from .watermark import detection_accuracy

            tau, _ = detection_accuracy(pruned, test.images, load_key(args.key))
            print(f"  detection rate after (tau): {tau:.4f}")
    return EXIT_OK


def _cmd_attack_finetune(args) -> int:
    from .attacks import FinetuneAttackSpec, finetune_attack
    from .keygen import load_key
    from .nn import accuracy, load_model, save_model
    from .watermark import detection_accuracy

    model = load_model(args.model)
    forged = load_key(args.forged_key)
    train, test = _load_dataset_pair(args.data)
    spec = FinetuneAttackSpec(
        forged_key=forged,
        subset_size=args.subset_size,
        subset_seed=args.subset_seed,
        epochs=args.epochs if args.epochs is not None else 30,
        config=_embed_config_from(args),
    )
    attacked = finetune_attack(model, train, spec)
    out = Path(args.out) if args.out else _out_dir(args, ".") / "attacked.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(attacked, out)
    print(f"wrote attacked model: {out}")
    print(f"  test accuracy after: {accuracy(attacked, test):.4f}")
    tau_forged, _ = detection_accuracy(attacked, test.images, forged)
    print(f"  detection rate, forged key: {tau_forged:.4f}")
    if args.key:
        tau, _ = detection_accuracy(attacked, test.images, load_key(args.key))
        print(f"  detection rate, original key: {tau:.4f}")
    return EXIT_OK


def _run_experiment(args, kind: str) -> int:
    from .experiments import run_blocksize_grid, run_finetune_grid, run_prune_sweep

    runner = {
        "table1": run_blocksize_grid,
        "finetune": run_finetune_grid,
        "prune": run_prune_sweep,
    }[kind]
    config = _experiment_config(args)
    out = _out_dir(args, f"runs/{kind}")
    log = None if args.quiet else lambda msg: print(f"  {msg}", flush=True)
    table = runner(config, out_dir=out, log=log)
    print(table.summary(), end="")
    print(f"wrote: {out}/table.json, table.csv, summary.txt, manifest.json")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .experiments import ResultsTable, emit_report

    table = ResultsTable.load(args.table)
    out = Path(args.out_dir) if args.out_dir else Path(args.table).parent
    result = emit_report(table, out)
    print(table.summary(), end="")
    written = ", ".join(str(p) for p in result["paths"].values())
    print(f"wrote: {written}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # The same flags exist on the root parser (with real defaults) and on
    # every subparser (defaulting to SUPPRESS), so both `blockmark --seed 7
    # train ...` and `blockmark train --seed 7 ...` work; a value given
    # after the subcommand wins because SUPPRESS leaves the root value alone
    # unless the flag actually appears.
    seed_default = argparse.SUPPRESS if suppress else None
    flag_default = argparse.SUPPRESS if suppress else False
    text_default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=seed_default,
                        help="primary seed of the subcommand (key seed for "
                             "keygen, training seed elsewhere)")
    parser.add_argument("--deterministic", action="store_true",
                        default=flag_default,
                        help="pin numeric libraries to one thread for "
                             "bit-reproducible runs")
    parser.add_argument("--out-dir", default=text_default,
                        help="directory for output files")
    parser.add_argument("--config", default=text_default,
                        help="plain-text key=value file with experiment "
                             "config overrides")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    sub.add_argument("--max-lr", type=float, default=None, dest="max_lr")
    sub.add_argument("--width", type=int, default=None,
                     help="channel width of the first conv stage")
    sub.add_argument("--mode", choices=("joint", "sequential"), default=None,
                     help="how plain and transformed images are combined")
    sub.add_argument("--augment-pad", type=int, default=None, dest="augment_pad",
                     help="crop padding for plain images; 0 means flip-only")
    sub.add_argument("--no-augment", action="store_true", dest="no_augment")
    sub.add_argument("--augment-transformed", choices=("none", "flip"),
                     default=None, dest="augment_transformed")
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--batchnorm", action="store_true", dest="batchnorm",
                       default=None)
    group.add_argument("--no-batchnorm", action="store_false", dest="batchnorm")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="blockmark",
        description="Watermark image classifiers with a secret block-wise "
                    "pixel code; verify ownership; run attacks.",
    )
    _add_global_flags(parser, suppress=False)
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def sub(name, help_text, handler):
        p = subs.add_parser(name, help=help_text, parents=[])
        _add_global_flags(p, suppress=True)
        p.set_defaults(handler=handler)
        return p

    p = sub("keygen", "generate and save a secret key", _cmd_keygen)
    p.add_argument("--block-size", type=int, required=True, dest="block_size")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--out", default=None, help="key file path (default key.json)")

    p = sub("transform", "rewrite a dataset with a key", _cmd_transform)
    p.add_argument("--key", required=True, help="key file path")
    p.add_argument("--data", required=True,
                   help="dataset: binary batch dir, raw-tensor dir, or "
                        "'synthetic[:k=v,...]'")

    p = sub("train", "train a classifier (watermarked when --key is given)",
            _cmd_train)
    p.add_argument("--data", required=True)
    p.add_argument("--key", default=None, help="embed this key while training")
    p.add_argument("--out", default=None, help="model path (default model.ckpt)")
    _add_train_flags(p)

    p = sub("verify", "check model ownership against a key", _cmd_verify)
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--gate", action="store_true",
                   help="exit with code 3 when the verdict is Unsuccessful")
    p.add_argument("--report", default=None, help="write the JSON report here")

    p = sub("attack-prune", "zero the smallest weights of a saved model",
            _cmd_attack_prune)
    p.add_argument("--model", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None, help="evaluate on this dataset")
    p.add_argument("--key", default=None, help="also report tau with this key")

    p = sub("attack-finetune", "re-embed a forged key on a data subset",
            _cmd_attack_finetune)
    p.add_argument("--model", required=True)
    p.add_argument("--forged-key", required=True, dest="forged_key")
    p.add_argument("--data", required=True)
    p.add_argument("--subset-size", type=int, required=True, dest="subset_size")
    p.add_argument("--subset-seed", type=int, default=3, dest="subset_seed")
    p.add_argument("--out", default=None)
    p.add_argument("--key", default=None,
                   help="also report tau with the original key")
    _add_train_flags(p)

    for name, help_text in (
        ("exp-table1", "block-size grid: baseline + one embedded model per M"),
        ("exp-finetune", "fine-tuning attack grid over subset sizes"),
        ("exp-prune", "pruning sweep over rates"),
    ):
        p = sub(name, help_text,
                lambda a, kind=name.partition("-")[2]: _run_experiment(a, kind))
        p.add_argument("--data", default=None,
                       help="dataset spec (default: desk-scale synthetic)")
        p.add_argument("--block-sizes", type=_int_tuple, default=None,
                       dest="block_sizes", help="comma-separated, e.g. 2,4,8")
        p.add_argument("--key-seed", type=int, default=None, dest="key_seed")
        p.add_argument("--forged-key-seed", type=int, default=None,
                       dest="forged_key_seed")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--max-lr", type=float, default=None, dest="max_lr")
        p.add_argument("--width", type=int, default=None)
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--subset-sizes", type=_int_tuple, default=None,
                       dest="subset_sizes")
        p.add_argument("--finetune-epochs", type=int, default=None,
                       dest="finetune_epochs")
        p.add_argument("--prune-rates", type=_float_tuple, default=None,
                       dest="prune_rates")
        p.add_argument("--augment-pad", type=int, default=None, dest="augment_pad")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--batchnorm", action="store_true", dest="batchnorm",
                           default=None)
        group.add_argument("--no-batchnorm", action="store_false", dest="batchnorm")
        p.add_argument("--quiet", action="store_true")

    p = sub("report", "re-emit table files from a saved table", _cmd_report)
    p.add_argument("--table", required=True, help="path to a table.json")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "deterministic", False):
        _set_deterministic()
    try:
        return args.handler(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BlockmarkError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
