"""Secret key generation, comparison, and storage.

A key holds one bit per (channel, row, column) position of an M x M pixel
block, so its length is ``channels * block_size**2``. Bit ``k`` decides
whether the k-th component of a flattened block gets intensity-inverted by
the block-wise transform.

Bits are drawn Bernoulli(0.5) from a SplitMix64 stream seeded with a 64-bit
integer. SplitMix64 is a small, well-known mixing generator implemented here
with plain integer arithmetic, so regenerating a key from its seed gives the
same bits on every platform and numpy version. Each 64-bit output word is
consumed most-significant-bit first.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DigestMismatchError,
    MalformedFileError,
    ShapeMismatchError,
    UnsupportedVersionError,
)

KEY_FORMAT_VERSION = 1
FINGERPRINT_ALGORITHM = "sha256"

_MASK64 = (1 << 64) - 1


def _splitmix64_words(seed: int, count: int) -> list[int]:
    """Return `count` successive 64-bit outputs of SplitMix64 seeded by `seed`."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


def _bits_from_seed(seed: int, n_bits: int) -> np.ndarray:
    words = _splitmix64_words(seed, (n_bits + 63) // 64)
    raw = np.array(words, dtype=np.uint64).astype(">u8").tobytes()
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n_bits]
    return bits.astype(np.uint8)


def _fingerprint(block_size: int, channels: int, bits: np.ndarray) -> str:
    # Canonical form: header + dimensions + bits packed MSB-first with zero padding.
    h = hashlib.sha256()
    h.update(b"blockmark-key\x00")
    h.update(struct.pack("<QQQ", block_size, channels, bits.size))
    h.update(np.packbits(bits).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class SecretKey:
    """Immutable watermark secret: a bit per within-block coordinate."""

    block_size: int
    channels: int
    bits: np.ndarray
    seed: int
    fingerprint: str

    def __post_init__(self):
        if self.block_size < 1 or self.channels < 1:
            raise ValueError("block_size and channels must be positive")
        expected = self.channels * self.block_size * self.block_size
        if self.bits.size != expected:
            raise ValueError(
                f"key needs {expected} bits for M={self.block_size}, "
                f"c={self.channels}, got {self.bits.size}"
            )
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("key bits must all be 0 or 1")
        self.bits.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, SecretKey):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and self.channels == other.channels
            and self.seed == other.seed
            and self.fingerprint == other.fingerprint
            and np.array_equal(self.bits, other.bits)
        )

    @property
    def length(self) -> int:
        return int(self.bits.size)


def generate_key(seed: int, block_size: int, channels: int) -> SecretKey:
    """Generate the Bernoulli(0.5) key for (`seed`, `block_size`, `channels`).

    Pure function of its arguments: the same inputs always produce the same
    key. An all-zero key (probability 2**-(c*M*M)) would make the transform
    the identity; it is allowed but flagged with a warning.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if not 0 <= seed <= _MASK64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    bits = _bits_from_seed(seed, channels * block_size * block_size)
    if not bits.any():
        warnings.warn(
            "generated key has zero Hamming weight; the transform will be "
            "a no-op and the watermark undetectable",
            stacklevel=2,
        )
    return SecretKey(
        block_size=block_size,
        channels=channels,
        bits=bits,
        seed=seed,
        fingerprint=_fingerprint(block_size, channels, bits),
    )


def key_distance(a: SecretKey, b: SecretKey) -> float:
    """Normalized Hamming distance between two equal-shape keys, in [0, 1]."""
    if a.block_size != b.block_size or a.channels != b.channels:
        raise ShapeMismatchError(
            f"keys have different shapes: M={a.block_size},c={a.channels} "
            f"vs M={b.block_size},c={b.channels}"
        )
    return float(np.count_nonzero(a.bits != b.bits) / a.bits.size)


def save_key(key: SecretKey, path) -> None:
    """Write `key` to `path` as a self-describing JSON container."""
    packed = np.packbits(key.bits)
    doc = {
        "format": "blockmark-secret-key",
        "format_version": KEY_FORMAT_VERSION,
        "block_size": key.block_size,
        "channels": key.channels,
        "seed": key.seed,
        "bit_length": key.length,
        "bits_hex": packed.tobytes().hex(),
        "fingerprint_algorithm": FINGERPRINT_ALGORITHM,
        "fingerprint": key.fingerprint,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_key(path) -> SecretKey:
    """Load a key written by :func:`save_key`, verifying its fingerprint.

    Raises MalformedFileError for unparseable or incomplete files,
    UnsupportedVersionError for unknown format versions, and
    DigestMismatchError when the stored fingerprint does not match the bits.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != "blockmark-secret-key":
        raise MalformedFileError(f"{path}: not a blockmark key file")
    version = doc.get("format_version")
    if version != KEY_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported key format version {version!r}"
        )
    required = (
        "block_size",
        "channels",
        "seed",
        "bit_length",
        "bits_hex",
        "fingerprint",
    )
    missing = [f for f in required if f not in doc]
    if missing:
        raise MalformedFileError(f"{path}: missing fields {missing}")
    try:
        packed = np.frombuffer(bytes.fromhex(doc["bits_hex"]), dtype=np.uint8)
        bits = np.unpackbits(packed)[: doc["bit_length"]].astype(np.uint8)
        block_size = int(doc["block_size"])
        channels = int(doc["channels"])
        seed = int(doc["seed"])
    except (ValueError, TypeError) as e:
        raise MalformedFileError(f"{path}: {e}") from e
    if bits.size != channels * block_size * block_size:
        raise MalformedFileError(
            f"{path}: bit_length {bits.size} inconsistent with "
            f"M={block_size}, c={channels}"
        )
    actual = _fingerprint(block_size, channels, bits)
    if actual != doc["fingerprint"]:
        raise DigestMismatchError(
            f"{path}: fingerprint mismatch (stored {doc['fingerprint'][:12]}..., "
            f"recomputed {actual[:12]}...)"
        )
    return SecretKey(
        block_size=block_size,
        channels=channels,
        bits=bits,
        seed=seed,
        fingerprint=actual,
    )
