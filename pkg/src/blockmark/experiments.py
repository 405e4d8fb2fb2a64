"""Experiment runners: block-size grid, fine-tuning grid, pruning sweep.

Each runner is deterministic given its config. Completed rows are persisted
as one JSON file each, so an interrupted run resumes without recomputing
them, and every run writes a manifest (config, seeds, code version, key
fingerprints) sufficient to reproduce it exactly. Result tables store
fractions in [0, 1]; the human-readable summary formats percentages. Table
files contain no timestamps, so identical configs yield identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .attacks import FinetuneAttackSpec, finetune_attack, pruning_sweep
from .data import LabeledDataset, load_cifar10, load_raw_dataset, synthetic_dataset
from .errors import DataError, DivisibilityError, MalformedFileError
from .keygen import SecretKey, generate_key
from .nn import Model, accuracy, predict_labels
from .watermark import EmbedConfig, detection_accuracy, embed, train_plain

TABLE_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

DEFAULT_PRUNE_RATES = tuple(round(i / 10, 1) for i in range(10))


# ---------------------------------------------------------------------------
# dataset resolution


def resolve_dataset(spec: str) -> tuple[LabeledDataset, LabeledDataset]:
    """Turn a dataset spec string into (train, test) sets.

    Accepted forms:
      "synthetic"                        procedural data, defaults below
      "synthetic:n=2000,test_n=512,classes=10,shape=3x16x16,seed=0"
      "cifar:<dir>"                      CIFAR-10 binary batch directory
      "raw:<dir>"                        directory with train/ and test/
                                         raw-tensor datasets
      "<dir>"                            auto-detected cifar or raw layout
    """
    kind, sep, rest = spec.partition(":")
    if kind == "synthetic":
        params = _parse_kv(rest) if sep else {}
        return _synthetic_pair(params)
    if kind == "cifar":
        return load_cifar10(rest)
    if kind == "raw":
        root = Path(rest)
        return load_raw_dataset(root / "train"), load_raw_dataset(root / "test")
    path = Path(spec)
    if (path / "data_batch_1.bin").exists():
        return load_cifar10(path)
    if (path / "train" / "manifest.json").exists():
        return load_raw_dataset(path / "train"), load_raw_dataset(path / "test")
    raise DataError(
        f"cannot interpret dataset spec {spec!r}: expected 'synthetic[:...]', "
        f"'cifar:<dir>', 'raw:<dir>', or a directory in one of those layouts"
    )


def _parse_kv(text: str) -> dict:
    params = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        if not sep:
            raise DataError(f"malformed dataset parameter {item!r}, expected key=value")
        params[name.strip()] = value.strip()
    return params


def _synthetic_pair(params: dict) -> tuple[LabeledDataset, LabeledDataset]:
    known = {"n", "test_n", "classes", "shape", "seed", "variants", "noise"}
    unknown = set(params) - known
    if unknown:
        raise DataError(f"unknown synthetic dataset parameters: {sorted(unknown)}")
    n = int(params.get("n", 2000))
    test_n = int(params.get("test_n", 512))
    classes = int(params.get("classes", 10))
    seed = int(params.get("seed", 0))
    variants = int(params.get("variants", 32))
    noise = float(params.get("noise", 0.06))
    shape_text = params.get("shape", "3x16x16")
    try:
        shape = tuple(int(part) for part in shape_text.split("x"))
    except ValueError:
        shape = ()
    if len(shape) != 3:
        raise DataError(f"shape must look like '3x16x16', got {shape_text!r}")
    full = synthetic_dataset(
        seed=seed, n=n + test_n, classes=classes, shape=shape,
        variants=variants, noise=noise,
    )
    train = LabeledDataset(
        full.images[:n].copy(), full.labels[:n].copy(), classes, split="train"
    )
    test = LabeledDataset(
        full.images[n:].copy(), full.labels[n:].copy(), classes, split="test"
    )
    return train, test


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment run depends on, hashable into a digest.

    The output directory is deliberately not part of the config: moving a
    run must not invalidate its cached rows.
    """

    dataset: str = "synthetic"
    block_sizes: tuple[int, ...] = (2, 4, 8, 16)
    key_seed: int = 1
    forged_key_seed: int = 2
    train_seed: int = 0
    epochs: int = 30
    batch_size: int = 128
    max_lr: float = 0.2
    model_width: int = 16
    model_batchnorm: bool = False
    threshold: float = 0.5
    embed_mode: str = "joint"
    augment: bool = True
    augment_pad: int = 0
    subset_sizes: tuple[int, ...] = (50, 100, 200)
    finetune_epochs: int = 30
    finetune_seed: int = 3
    prune_rates: tuple[float, ...] = DEFAULT_PRUNE_RATES

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(m) for m in self.block_sizes))
        object.__setattr__(
            self, "subset_sizes", tuple(int(s) for s in self.subset_sizes)
        )
        object.__setattr__(
            self, "prune_rates", tuple(float(r) for r in self.prune_rates)
        )
        if not self.block_sizes or any(m < 1 for m in self.block_sizes):
            raise ValueError("block_sizes must be a non-empty list of positive ints")
        if self.key_seed == self.forged_key_seed:
            raise ValueError("key_seed and forged_key_seed must differ")
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError("threshold must lie in [0, 1)")
        if self.augment_pad < 0:
            raise ValueError("augment_pad must be >= 0")
        if any(s < 1 for s in self.subset_sizes):
            raise ValueError("subset sizes must be >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.prune_rates):
            raise ValueError("prune rates must lie in [0, 1]")
        if list(self.prune_rates) != sorted(self.prune_rates):
            raise ValueError("prune rates must be sorted ascending")
        if self.embed_mode not in ("joint", "sequential"):
            raise ValueError(f"unknown embed mode {self.embed_mode!r}")

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in raw.items()
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def embed_config(self, block_size_epochs: int | None = None) -> EmbedConfig:
        return EmbedConfig(
            epochs=block_size_epochs or self.epochs,
            batch_size=self.batch_size,
            mode=self.embed_mode,
            train_seed=self.train_seed,
            max_lr=self.max_lr,
            augment=self.augment,
            augment_pad=self.augment_pad,
            model_width=self.model_width,
            model_batchnorm=self.model_batchnorm,
        )


# ---------------------------------------------------------------------------
# result tables

_FRACTION_PREFIXES = ("acc", "tau")
_FRACTION_NAMES = {"rate", "accuracy"}


@dataclass
class ResultsTable:
    """Ordered experiment rows plus the schema they must all satisfy."""

    kind: str
    schema: tuple[str, ...]
    rows: list[dict]
    meta: dict

    def __post_init__(self):
        self.schema = tuple(self.schema)
        for i, row in enumerate(self.rows):
            if set(row) != set(self.schema):
                raise ValueError(
                    f"row {i} keys {sorted(row)} do not match schema "
                    f"{sorted(self.schema)}"
                )
            for name, value in row.items():
                if _is_fraction_column(name) and not 0.0 <= value <= 1.0:
                    raise ValueError(
                        f"row {i} column {name!r} must lie in [0, 1], got {value}"
                    )

    def to_dict(self) -> dict:
        return {
            "format_version": TABLE_FORMAT_VERSION,
            "kind": self.kind,
            "schema": list(self.schema),
            "rows": self.rows,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "ResultsTable":
        try:
            version = payload["format_version"]
            if version != TABLE_FORMAT_VERSION:
                raise MalformedFileError(
                    f"unsupported results table version {version}"
                )
            return cls(
                kind=payload["kind"],
                schema=tuple(payload["schema"]),
                rows=list(payload["rows"]),
                meta=dict(payload["meta"]),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedFileError(f"malformed results table: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ResultsTable":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedFileError(f"results table is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def save(self, path) -> None:
        _atomic_write_text(Path(path), self.to_json())

    @classmethod
    def load(cls, path) -> "ResultsTable":
        path = Path(path)
        if not path.exists():
            raise DataError(f"results table not found: {path}")
        return cls.from_json(path.read_text())

    def summary(self) -> str:
        """Human-readable rendering with fractions shown as percentages."""
        lines = [f"{self.kind} ({len(self.rows)} rows)"]
        widths = {
            name: max(len(name), *(len(_fmt_cell(name, r[name])) for r in self.rows))
            if self.rows
            else len(name)
            for name in self.schema
        }
        header = "  ".join(name.ljust(widths[name]) for name in self.schema)
        lines.append(header)
        lines.append("-" * len(header))
        for row in self.rows:
            lines.append(
                "  ".join(
                    _fmt_cell(name, row[name]).ljust(widths[name])
                    for name in self.schema
                )
            )
        return "\n".join(lines) + "\n"


def _is_fraction_column(name: str) -> bool:
    return name in _FRACTION_NAMES or any(
        name.startswith(p) for p in _FRACTION_PREFIXES
    )


def _fmt_cell(name: str, value) -> str:
    if name == "rate":
        return f"{value:.1f}"
    if _is_fraction_column(name):
        return f"{100.0 * value:.2f}%"
    return str(value)


# ---------------------------------------------------------------------------
# persistence helpers


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _cached_row(out_dir: Path | None, config_digest: str, row_id: str, compute):
    """Return the cached row for `row_id` or compute and persist it."""
    if out_dir is None:
        return compute()
    row_path = Path(out_dir) / "rows" / f"{row_id}.json"
    if row_path.exists():
        try:
            payload = json.loads(row_path.read_text())
            if payload.get("config_digest") == config_digest:
                return payload["row"]
        except (json.JSONDecodeError, KeyError):
            pass  # fall through and recompute the damaged row
    row = compute()
    _atomic_write_text(
        row_path,
        json.dumps(
            {"config_digest": config_digest, "row_id": row_id, "row": row},
            sort_keys=True,
            indent=2,
        )
        + "\n",
    )
    return row


def _write_manifest(
    out_dir: Path, kind: str, config: ExperimentConfig, key_fingerprints: dict
) -> None:
    from . import __version__

    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "kind": kind,
        "code_version": __version__,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "key_fingerprints": key_fingerprints,
        "seeds": {
            "key_seed": config.key_seed,
            "forged_key_seed": config.forged_key_seed,
            "train_seed": config.train_seed,
            "finetune_seed": config.finetune_seed,
        },
    }
    _atomic_write_text(
        Path(out_dir) / "manifest.json",
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )


def _checkpointed_model(
    out_dir: Path | None, name: str, config_digest: str, build
) -> Model:
    """Build a model once per output directory; reload it on resumed runs.

    The file name carries the config digest so a directory reused with a
    different config never serves a stale model.
    """
    from .nn import load_model, save_model

    if out_dir is None:
        return build()
    path = Path(out_dir) / "models" / f"{name}_{config_digest[:12]}.ckpt"
    if path.exists():
        try:
            return load_model(path)
        except DataError:
            pass  # damaged checkpoint, rebuild below
    model = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    return model


# ---------------------------------------------------------------------------
# shared evaluation


def _check_divisibility(block_sizes, image_shape) -> None:
    _, h, w = image_shape
    for m in block_sizes:
        if h % m or w % m:
            raise DivisibilityError(
                f"block size {m} does not divide image height {h} and width {w}"
            )


def _keys_for(config: ExperimentConfig, block_size: int, channels: int):
    key = generate_key(
        seed=config.key_seed, block_size=block_size, channels=channels
    )
    forged = generate_key(
        seed=config.forged_key_seed, block_size=block_size, channels=channels
    )
    return key, forged


def _transformed_accuracy(
    model: Model, test: LabeledDataset, key: SecretKey
) -> float:
    from .transform import transform_array

    transformed = transform_array(test.images, key)
    predictions = predict_labels(model, transformed)
    return float((predictions == test.labels).mean())


def _five_columns(
    model: Model, test: LabeledDataset, key: SecretKey, forged: SecretKey
) -> dict:
    tau, _ = detection_accuracy(model, test.images, key)
    tau_forged, _ = detection_accuracy(model, test.images, forged)
    return {
        "acc_plain": accuracy(model, test),
        "acc_key": _transformed_accuracy(model, test, key),
        "tau": tau,
        "acc_forged": _transformed_accuracy(model, test, forged),
        "tau_forged": tau_forged,
    }


def _train_plain_baseline(train: LabeledDataset, config: ExperimentConfig) -> Model:
    return train_plain(train, config.embed_config())


# ---------------------------------------------------------------------------
# experiment runners

BLOCKSIZE_SCHEMA = (
    "model",
    "block_size",
    "acc_plain",
    "acc_key",
    "tau",
    "acc_forged",
    "tau_forged",
)

FINETUNE_SCHEMA = (
    "subset_size",
    "epochs",
    "acc_before",
    "tau_before",
    "acc_after",
    "tau_after",
    "tau_forged_after",
)

PRUNE_SCHEMA = ("rate", "accuracy", "tau")


def run_blocksize_grid(
    config: ExperimentConfig, out_dir=None, log=None
) -> ResultsTable:
    """Train one plain baseline plus one embedded model per block size.

    Every row reports accuracy on plain images, accuracy and detection rate
    on images transformed with the correct key, and the same pair for a
    forged key. The baseline row is evaluated with the keys of the smallest
    configured block size.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    train, test = resolve_dataset(config.dataset)
    _check_divisibility(config.block_sizes, train.image_shape)
    channels = train.image_shape[0]
    digest = config.digest()
    fingerprints = {}
    rows = []

    eval_m = config.block_sizes[0]
    base_key, base_forged = _keys_for(config, eval_m, channels)
    fingerprints[f"key_M{eval_m}"] = base_key.fingerprint
    fingerprints[f"forged_key_M{eval_m}"] = base_forged.fingerprint

    def baseline_row():
        _log(log, "training plain baseline")
        model = _checkpointed_model(
            out_dir, "baseline", digest,
            lambda: _train_plain_baseline(train, config),
        )
        row = {"model": "baseline", "block_size": eval_m}
        row.update(_five_columns(model, test, base_key, base_forged))
        return row

    rows.append(_cached_row(out_dir, digest, "baseline", baseline_row))

    for m in config.block_sizes:
        key, forged = _keys_for(config, m, channels)
        fingerprints[f"key_M{m}"] = key.fingerprint
        fingerprints[f"forged_key_M{m}"] = forged.fingerprint

        def embedded_row(m=m, key=key, forged=forged):
            _log(log, f"embedding watermark at block size {m}")
            model = _checkpointed_model(
                out_dir,
                f"embedded_M{m}",
                digest,
                lambda: embed(train, key, config.embed_config()),
            )
            row = {"model": "embedded", "block_size": m}
            row.update(_five_columns(model, test, key, forged))
            return row

        rows.append(_cached_row(out_dir, digest, f"M{m}", embedded_row))

    table = ResultsTable(
        kind="blocksize-grid",
        schema=BLOCKSIZE_SCHEMA,
        rows=rows,
        meta={"config_digest": digest, "threshold": config.threshold},
    )
    if out_dir is not None:
        _write_manifest(out_dir, "blocksize-grid", config, fingerprints)
        emit_report(table, out_dir)
    return table


def run_finetune_grid(
    config: ExperimentConfig, out_dir=None, log=None
) -> ResultsTable:
    """Attack one embedded model with forged-key fine-tuning per subset size."""
    out_dir = Path(out_dir) if out_dir is not None else None
    train, test = resolve_dataset(config.dataset)
    m = config.block_sizes[0]
    _check_divisibility([m], train.image_shape)
    channels = train.image_shape[0]
    digest = config.digest()
    key, forged = _keys_for(config, m, channels)
    fingerprints = {f"key_M{m}": key.fingerprint, f"forged_key_M{m}": forged.fingerprint}

    _log(log, f"embedding victim model at block size {m}")
    victim = _checkpointed_model(
        out_dir, f"victim_M{m}", digest,
        lambda: embed(train, key, config.embed_config()),
    )
    acc_before = accuracy(victim, test)
    tau_before, _ = detection_accuracy(victim, test.images, key)

    rows = []
    for size in config.subset_sizes:
        def attacked_row(size=size):
            _log(log, f"fine-tuning attack with subset size {size}")
            spec = FinetuneAttackSpec(
                forged_key=forged,
                subset_size=size,
                subset_seed=config.finetune_seed,
                epochs=config.finetune_epochs,
                config=config.embed_config(),
            )
            attacked = _checkpointed_model(
                out_dir,
                f"attacked_M{m}_n{size}",
                digest,
                lambda: finetune_attack(victim, train, spec),
            )
            tau_after, _ = detection_accuracy(attacked, test.images, key)
            tau_forged_after, _ = detection_accuracy(attacked, test.images, forged)
            return {
                "subset_size": size,
                "epochs": config.finetune_epochs,
                "acc_before": acc_before,
                "tau_before": tau_before,
                "acc_after": accuracy(attacked, test),
                "tau_after": tau_after,
                "tau_forged_after": tau_forged_after,
            }

        rows.append(_cached_row(out_dir, digest, f"subset{size}", attacked_row))

    table = ResultsTable(
        kind="finetune-grid",
        schema=FINETUNE_SCHEMA,
        rows=rows,
        meta={
            "config_digest": digest,
            "block_size": m,
            "threshold": config.threshold,
        },
    )
    if out_dir is not None:
        _write_manifest(out_dir, "finetune-grid", config, fingerprints)
        emit_report(table, out_dir)
    return table


def run_prune_sweep(config: ExperimentConfig, out_dir=None, log=None) -> ResultsTable:
    """Embed one model, then prune fresh copies across the configured rates."""
    out_dir = Path(out_dir) if out_dir is not None else None
    train, test = resolve_dataset(config.dataset)
    m = config.block_sizes[0]
    _check_divisibility([m], train.image_shape)
    channels = train.image_shape[0]
    digest = config.digest()
    key, _forged = _keys_for(config, m, channels)
    fingerprints = {f"key_M{m}": key.fingerprint}

    _log(log, f"embedding victim model at block size {m}")
    victim = _checkpointed_model(
        out_dir, f"victim_M{m}", digest,
        lambda: embed(train, key, config.embed_config()),
    )

    def sweep_rows():
        _log(log, f"pruning sweep over {len(config.prune_rates)} rates")
        return pruning_sweep(victim, key, test, config.prune_rates)

    rows = _cached_row(out_dir, digest, "sweep", sweep_rows)

    table = ResultsTable(
        kind="prune-sweep",
        schema=PRUNE_SCHEMA,
        rows=rows,
        meta={
            "config_digest": digest,
            "block_size": m,
            "threshold": config.threshold,
        },
    )
    if out_dir is not None:
        _write_manifest(out_dir, "prune-sweep", config, fingerprints)
        emit_report(table, out_dir)
    return table


def _log(log, message: str) -> None:
    if log is not None:
        log(message)


# ---------------------------------------------------------------------------
# report emission


def emit_report(table: ResultsTable, out_dir, plot: bool = True) -> dict:
    """Write table.json, table.csv, summary.txt, and a curve plot if visual.

    Output bytes depend only on the table contents, so identical inputs give
    identical files. Returns {"paths": {...}, "plotted": {...}} where the
    plotted series are exactly the values drawn (parsed back from the JSON
    just written), for correspondence checks against the table file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "table.json"
    _atomic_write_text(json_path, table.to_json())
    csv_path = out_dir / "table.csv"
    _atomic_write_text(csv_path, _to_csv(table))
    summary_path = out_dir / "summary.txt"
    _atomic_write_text(summary_path, table.summary())
    paths = {"json": json_path, "csv": csv_path, "summary": summary_path}
    plotted = {}
    parsed = ResultsTable.load(json_path)
    if plot and parsed.kind == "prune-sweep" and parsed.rows:
        plot_path = out_dir / "prune_curve.png"
        plotted = _plot_prune_curve(parsed, plot_path)
        paths["plot"] = plot_path
    return {"paths": paths, "plotted": plotted}


def _to_csv(table: ResultsTable) -> str:
    import csv
    import io

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(table.schema)
    for row in table.rows:
        writer.writerow([row[name] for name in table.schema])
    return buffer.getvalue()


def _plot_prune_curve(table: ResultsTable, path: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = [row["rate"] for row in table.rows]
    accs = [row["accuracy"] for row in table.rows]
    taus = [row["tau"] for row in table.rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5), dpi=120)
    ax.plot(rates, [100 * a for a in accs], marker="o", label="classification accuracy")
    ax.plot(rates, [100 * t for t in taus], marker="s", label="detection rate")
    threshold = table.meta.get("threshold")
    if threshold is not None:
        ax.axhline(100 * threshold, color="gray", linestyle=":", linewidth=1,
                   label="decision threshold")
    ax.set_xlabel("pruning rate")
    ax.set_ylabel("percent")
    ax.set_ylim(-2, 102)
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    # a None Date keeps the PNG byte-stable across reruns
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return {"rates": rates, "accuracy": accs, "tau": taus}
