"""Dataset ingestion, synthesis, subsetting, and training-time augmentation.

Images are float32 arrays of shape (n, channels, height, width) with values
in [0, 1]; labels are int64 class indices. Loaders are deterministic, and
every sampling operation takes an explicit seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, MalformedFileError, UnsupportedVersionError

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-planar pixel bytes
_CIFAR_BATCH_RECORDS = 10000

RAW_MANIFEST = "manifest.json"
RAW_FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    """Images plus integer labels, all the same shape, labels in range."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(
                f"images must have shape (n, c, h, w), got {self.images.shape}"
            )
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def load_cifar10(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the CIFAR-10 binary batches from `directory`.

    Expects the five training batch files and the test batch file, each
    holding 10000 records of one label byte followed by 3072 pixel bytes
    (channel-planar R, G, B, row-major). Pixels are scaled to [0, 1].
    """
    directory = Path(directory)
    train_parts = [_parse_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    test_images, test_labels = _parse_cifar_file(directory / CIFAR_TEST_FILE)
    train = LabeledDataset(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
        num_classes=10,
        split="train",
    )
    test = LabeledDataset(test_images, test_labels, num_classes=10, split="test")
    return train, test


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 batch file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size % _CIFAR_RECORD != 0:
        complete = raw.size // _CIFAR_RECORD
        raise MalformedFileError(
            f"{path}: truncated record at byte offset {complete * _CIFAR_RECORD} "
            f"(file holds {raw.size} bytes, record size is {_CIFAR_RECORD})"
        )
    records = raw.reshape(-1, _CIFAR_RECORD)
    if records.shape[0] != _CIFAR_BATCH_RECORDS:
        raise MalformedFileError(
            f"{path}: expected {_CIFAR_BATCH_RECORDS} records, "
            f"found {records.shape[0]}"
        )
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataError(
            f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def save_cifar10(train: LabeledDataset, test: LabeledDataset, directory) -> None:
    """Write datasets back out in the CIFAR-10 binary batch layout.

    Inverse of :func:`load_cifar10` for 8-bit-exact pixel values (the
    round-trip is lossless because pixels are stored as round(p * 255)).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(train) != _CIFAR_BATCH_RECORDS * len(CIFAR_TRAIN_FILES):
        raise DataError(
            f"CIFAR layout needs {_CIFAR_BATCH_RECORDS * len(CIFAR_TRAIN_FILES)} "
            f"training images, got {len(train)}"
        )
    if len(test) != _CIFAR_BATCH_RECORDS:
        raise DataError(
            f"CIFAR layout needs {_CIFAR_BATCH_RECORDS} test images, got {len(test)}"
        )
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        lo = i * _CIFAR_BATCH_RECORDS
        _write_cifar_file(directory / name, train, lo, lo + _CIFAR_BATCH_RECORDS)
    _write_cifar_file(directory / CIFAR_TEST_FILE, test, 0, len(test))


def _write_cifar_file(path: Path, ds: LabeledDataset, lo: int, hi: int) -> None:
    pixels = np.floor(ds.images[lo:hi].astype(np.float64) * 255.0 + 0.5)
    records = np.empty((hi - lo, _CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = ds.labels[lo:hi]
    records[:, 1:] = pixels.reshape(hi - lo, -1).astype(np.uint8)
    path.write_bytes(records.tobytes())


def synthetic_dataset(
    seed: int,
    n: int,
    classes: int,
    shape: tuple[int, int, int],
    variants: int = 32,
    noise: float = 0.06,
) -> LabeledDataset:
    """Procedural texture-classification dataset for fast desk-scale runs.

    The image is tiled into 4x4-pixel cells. Each class owns `variants`
    fixed texture maps assigning every cell one of four zero-mean
    micro-textures (flat, horizontal stripes, vertical stripes,
    checkerboard); that assignment is the only class signal. A sample picks
    one of its class maps uniformly, lays the textures over per-sample
    random cell intensities (pure nuisance), adds Gaussian pixel noise, and
    snaps to the 1/255 grid so values behave like decoded 8-bit images.

    Classification therefore requires reading local high-frequency texture,
    which keyed block inversion scrambles pixel-wise; cell brightness calls
    nothing. Many maps per class make the task multimodal, so a handful of
    samples per class does not reveal the full distribution.

    Labels cycle 0..classes-1, so n == classes yields one image per class.
    """
    c, h, w = shape
    if c < 1 or h < 1 or w < 1:
        raise DataError(f"invalid image shape {shape}")
    if classes < 1:
        raise DataError("classes must be positive")
    if n < classes:
        raise DataError(f"need n >= classes, got n={n}, classes={classes}")
    if variants < 1:
        raise DataError("variants must be positive")
    if noise < 0:
        raise DataError("noise must be non-negative")
    cell = 4
    if h % cell or w % cell:
        raise DataError(f"synthetic images need height/width multiples of {cell}")
    rng = np.random.default_rng(np.random.PCG64(seed))

    yy, xx = np.meshgrid(np.arange(cell), np.arange(cell), indexing="ij")
    patterns = np.stack(
        [
            np.zeros((cell, cell)),
            np.where(yy % 2 == 0, 1.0, -1.0),  # horizontal stripes
            np.where(xx % 2 == 0, 1.0, -1.0),  # vertical stripes
            np.where((yy + xx) % 2 == 0, 1.0, -1.0),  # checkerboard
        ]
    )
    gains = np.array([1.0, 0.85, 0.7])[:c] if c <= 3 else np.linspace(1.0, 0.6, c)
    amp = 0.25
    cells_y, cells_x = h // cell, w // cell
    tex_ids = rng.integers(0, len(patterns), size=(classes, variants, cells_y, cells_x))
    # zero-mean texture layer per (class, variant): (K, V, c, h, w)
    tiles = patterns[tex_ids]  # (K, V, cy, cx, cell, cell)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(
        classes, variants, cells_y * cell, cells_x * cell
    )
    textures = amp * gains[None, None, :, None, None] * tiles[:, :, None, :, :]

    labels = np.arange(n, dtype=np.int64) % classes
    picks = rng.integers(0, variants, size=n)
    base = rng.uniform(0.35, 0.65, size=(n, c, cells_y, cells_x))
    base = base.repeat(cell, axis=2).repeat(cell, axis=3)
    jitter = rng.normal(0.0, noise, size=(n, c, h, w))
    images = np.clip(base + textures[labels, picks] + jitter, 0.0, 1.0)
    images = np.floor(images * 255.0 + 0.5) / 255.0
    return LabeledDataset(images.astype(np.float32), labels, classes, split="train")


def subset(
    dataset: LabeledDataset, size: int, seed: int, stratified: bool = False
) -> LabeledDataset:
    """Deterministic random sample of `size` items.

    Stratified mode balances classes to within one item; with `size` an exact
    multiple of the class count every class contributes size/classes items.
    """
    if size > len(dataset):
        raise DataError(f"subset size {size} exceeds dataset size {len(dataset)}")
    if size < 0:
        raise DataError("subset size must be non-negative")
    rng = np.random.default_rng(np.random.PCG64(seed))
    if not stratified:
        idx = rng.permutation(len(dataset))[:size]
    else:
        per_class = [size // dataset.num_classes] * dataset.num_classes
        for k in range(size % dataset.num_classes):
            per_class[k] += 1
        chosen = []
        for k in range(dataset.num_classes):
            members = np.nonzero(dataset.labels == k)[0]
            if len(members) < per_class[k]:
                raise DataError(
                    f"class {k} has {len(members)} members, "
                    f"need {per_class[k]} for a stratified subset"
                )
            chosen.append(members[rng.permutation(len(members))[: per_class[k]]])
        idx = rng.permutation(np.concatenate(chosen))
    return replace(
        dataset, images=dataset.images[idx].copy(), labels=dataset.labels[idx].copy()
    )


@dataclass(frozen=True)
class AugmentationPolicy:
    """Zero-pad by `pad`, crop back to the original size, maybe flip."""

    pad: int = 4
    flip_prob: float = 0.5


@dataclass(frozen=True)
class AugmentDraw:
    """One realization of the augmentation randomness."""

    flip: bool
    offset_y: int
    offset_x: int


def sample_draw(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentDraw:
    """Draw crop offsets and a flip decision from the policy's stream."""
    return AugmentDraw(
        flip=bool(rng.random() < policy.flip_prob),
        offset_y=int(rng.integers(0, 2 * policy.pad + 1)),
        offset_x=int(rng.integers(0, 2 * policy.pad + 1)),
    )


def augment(
    image: np.ndarray, policy: AugmentationPolicy, draw: AugmentDraw
) -> np.ndarray:
    """Apply one augmentation draw; output shape equals input shape."""
    c, h, w = image.shape
    p = policy.pad
    padded = np.pad(image, ((0, 0), (p, p), (p, p)))
    out = padded[:, draw.offset_y : draw.offset_y + h, draw.offset_x : draw.offset_x + w]
    if draw.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def save_raw_dataset(dataset: LabeledDataset, directory) -> None:
    """Write a dataset as one little-endian float32 file per image plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(dataset)):
        name = f"img_{i:06d}.f32"
        (directory / name).write_bytes(
            np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes()
        )
        entries.append({"file": name, "label": int(dataset.labels[i])})
    manifest = {
        "format": "blockmark-raw-dataset",
        "format_version": RAW_FORMAT_VERSION,
        "dtype": "<f4",
        "shape": list(dataset.image_shape),
        "num_classes": dataset.num_classes,
        "split": dataset.split,
        "images": entries,
    }
    (directory / RAW_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_raw_dataset(directory) -> LabeledDataset:
    """Load a dataset written by :func:`save_raw_dataset`."""
    directory = Path(directory)
    manifest_path = directory / RAW_MANIFEST
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{manifest_path}: not valid JSON: {e}") from e
    if manifest.get("format") != "blockmark-raw-dataset":
        raise MalformedFileError(f"{manifest_path}: not a raw dataset manifest")
    if manifest.get("format_version") != RAW_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{manifest_path}: unsupported raw dataset version "
            f"{manifest.get('format_version')!r}"
        )
    try:
        shape = tuple(int(v) for v in manifest["shape"])
        entries = manifest["images"]
        num_classes = int(manifest["num_classes"])
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedFileError(f"{manifest_path}: {e}") from e
    count = len(entries)
    images = np.empty((count,) + shape, dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    expected_bytes = 4 * int(np.prod(shape))
    for i, entry in enumerate(entries):
        blob = (directory / entry["file"]).read_bytes()
        if len(blob) != expected_bytes:
            raise MalformedFileError(
                f"{directory / entry['file']}: expected {expected_bytes} bytes, "
                f"got {len(blob)}"
            )
        images[i] = np.frombuffer(blob, dtype="<f4").reshape(shape)
        labels[i] = entry["label"]
    return LabeledDataset(
        images, labels, num_classes, split=manifest.get("split", "train")
    )
