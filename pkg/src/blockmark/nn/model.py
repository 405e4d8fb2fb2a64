"""Model container: architecture descriptor, named tensors, checkpoint I/O.

A model is an ordered list of layer specs plus two flat dicts of named
arrays: trainable parameters and non-trainable buffers (batch-norm running
statistics). Checkpoints are a single self-describing file: a magic line,
a JSON header (format version, architecture, metadata, tensor index), and
the raw little-endian tensor bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import (
    MalformedFileError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from .layers import build_layers

CHECKPOINT_MAGIC = b"BMCKPT1\n"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class Model:
    """Feed-forward classifier with explicit forward/backward passes."""

    def __init__(self, architecture, params, buffers, metadata=None):
        self.architecture = [dict(spec) for spec in architecture]
        self.layers = build_layers(self.architecture)
        self.params = params
        self.buffers = buffers
        self.metadata = dict(metadata or {})

    @classmethod
    def initialize(cls, architecture, seed: int, dtype=np.float32, metadata=None):
        """Fresh model with fan-in-scaled uniform weights and zero biases.

        Weights are drawn U(-b, b) with b = sqrt(6 / fan_in) from a PCG64
        stream seeded by `seed`; layer order fixes the draw order.
        """
        layers = build_layers(architecture)
        rng = np.random.default_rng(np.random.PCG64(seed))
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        for layer in layers:
            if layer.param_names:
                params.update(layer.init_params(rng, dtype))
            if hasattr(layer, "init_buffers"):
                buffers.update(layer.init_buffers(dtype))
        meta = dict(metadata or {})
        meta.setdefault("init_seed", seed)
        return cls(architecture, params, buffers, meta)

    # -- inference / training passes -------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode logits; deterministic and side-effect free."""
        if x.ndim != 4:
            raise ShapeMismatchError(
                f"expected a batch of shape (n, c, h, w), got {x.shape}"
            )
        y = x
        for layer in self.layers:
            y, _ = layer.forward(self.params, self.buffers, y, train=False)
        return y

    def forward_train(self, x: np.ndarray):
        """Training-mode forward; returns logits and per-layer caches.

        Batch-norm layers use batch statistics and update their running
        buffers as a side effect.
        """
        caches = []
        y = x
        for layer in self.layers:
            y, cache = layer.forward(self.params, self.buffers, y, train=True)
            caches.append(cache)
        return y, caches

    def backward(self, caches, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dy = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, layer_grads = layer.backward(self.params, cache, dy)
            grads.update(layer_grads)
        return grads

    # -- structure helpers -------------------------------------------------

    @property
    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def num_classes(self) -> int:
        for spec in reversed(self.architecture):
            if spec["kind"] == "dense":
                return spec["out_features"]
        raise ValueError("architecture has no dense layer")

    def prunable_weight_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(layer.prunable_names)
        return names

    def copy(self) -> "Model":
        return Model(
            self.architecture,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            dict(self.metadata),
        )

    def astype(self, dtype) -> "Model":
        return Model(
            self.architecture,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            dict(self.metadata),
        )

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.isfinite(value).all():
                raise FloatingPointError(f"non-finite values in parameter {name}")

    def digest(self) -> str:
        """Collision-resistant digest of architecture plus tensor contents."""
        h = hashlib.sha256()
        h.update(b"blockmark-model\x00")
        h.update(json.dumps(self.architecture, sort_keys=True).encode())
        for group in (self.params, self.buffers):
            for name in sorted(group):
                arr = np.ascontiguousarray(group[name])
                h.update(name.encode())
                h.update(str(arr.dtype).encode())
                h.update(str(arr.shape).encode())
                h.update(arr.tobytes())
        return h.hexdigest()


def save_model(model: Model, path) -> None:
    """Write a checkpoint: magic, JSON header, then raw tensor bytes."""
    index = []
    blobs = []
    offset = 0
    for kind, group in (("param", model.params), ("buffer", model.buffers)):
        for name in group:
            arr = group[name]
            tag = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
            if tag is None:
                raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
            blob = np.ascontiguousarray(arr).astype(tag).tobytes()
            index.append(
                {
                    "name": name,
                    "kind": kind,
                    "dtype": tag,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "architecture": model.architecture,
            "metadata": model.metadata,
            "tensors": index,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_model(path) -> Model:
    """Load a checkpoint written by :func:`save_model`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise MalformedFileError(f"{path}: not a blockmark checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise MalformedFileError(f"{path}: truncated header length field")
    (header_len,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + header_len:
        raise MalformedFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + header_len])
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{path}: bad header JSON: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported checkpoint version "
            f"{header.get('format_version')!r}"
        )
    body = raw[pos + header_len :]
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise MalformedFileError(
                f"{path}: unsupported tensor dtype {entry['dtype']!r}"
            )
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise MalformedFileError(
                f"{path}: tensor {entry['name']} extends past end of file"
            )
        arr = (
            np.frombuffer(body[lo:hi], dtype=dtype)
            .reshape(entry["shape"])
            .astype(dtype.newbyteorder("="))
        )
        if entry["kind"] == "buffer":
            buffers[entry["name"]] = arr
        else:
            params[entry["name"]] = arr
    try:
        return Model(header["architecture"], params, buffers, header.get("metadata"))
    except (KeyError, ValueError) as e:
        raise MalformedFileError(f"{path}: inconsistent checkpoint: {e}") from e
