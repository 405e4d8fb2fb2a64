"""Block-wise negative/positive image transformation keyed by a secret bit vector.

An image of shape (c, h, w) with pixels in [0, 1] is cut into M x M blocks.
Each block is flattened to a vector of length c*M*M in channel-major order
(component index k = ch*M*M + row*M + col), every component is quantized to
an 8-bit integer, components whose key bit is 1 are XORed with 255 (a
photographic negative of that coordinate), and the block is scaled back to
[0, 1]. All blocks share the same key, so the key pattern tiles the image.

Quantization rule, fixed so outputs are identical across implementations:
``q = floor(x * 255 + 0.5)`` computed in float64 (round half away from zero
for the non-negative inputs allowed here). Outputs are exact multiples of
1/255 in the input dtype, which makes the transform an involution on images
whose pixels already lie on that grid.
"""

from __future__ import annotations

import numpy as np

from .errors import DivisibilityError, PixelRangeError, ShapeMismatchError
from .keygen import SecretKey


def _validate_image(image: np.ndarray, key: SecretKey) -> None:
    if image.ndim != 3:
        raise ShapeMismatchError(
            f"expected an image of shape (channels, height, width), "
            f"got ndim={image.ndim}"
        )
    c, h, w = image.shape
    if c != key.channels:
        raise ShapeMismatchError(
            f"image has {c} channels but key expects {key.channels}"
        )
    m = key.block_size
    if h % m != 0 or w % m != 0:
        raise DivisibilityError(
            f"image height {h} and width {w} must be multiples of "
            f"block size {m}"
        )
    lo, hi = float(image.min(initial=0.0)), float(image.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise PixelRangeError(f"pixel values must lie in [0, 1], found [{lo}, {hi}]")


def transform(image: np.ndarray, key: SecretKey) -> np.ndarray:
    """Apply the keyed block-wise inversion to one (c, h, w) image.

    Returns a new array of the same shape and dtype; the input is untouched.
    """
    _validate_image(image, key)
    c, h, w = image.shape
    m = key.block_size
    # (c, h, w) -> (blocks, c*m*m), channel-major then row-major inside a block.
    blocks = (
        image.reshape(c, h // m, m, w // m, m)
        .transpose(1, 3, 0, 2, 4)
        .reshape(-1, c * m * m)
    )
    q = np.floor(blocks.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    q[:, key.bits.astype(bool)] ^= np.uint8(255)
    out = (q.astype(np.float64) / 255.0).astype(image.dtype)
    return np.ascontiguousarray(
        out.reshape(h // m, w // m, c, m, m)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, h, w)
    )


def transform_batch(images, key: SecretKey) -> list[np.ndarray]:
    """Transform a sequence (or a stacked (n, c, h, w) array) of images.

    Order-preserving elementwise application; the first failing image aborts
    the batch with its position included in the error message.
    """
    out = []
    for i, image in enumerate(images):
        try:
            out.append(transform(np.asarray(image), key))
        except (ShapeMismatchError, DivisibilityError, PixelRangeError) as e:
            raise type(e)(f"image {i}: {e}") from e
    return out


def transform_array(images: np.ndarray, key: SecretKey) -> np.ndarray:
    """Like :func:`transform_batch` but stacks the result back into one array."""
    if images.ndim != 4:
        raise ShapeMismatchError(
            f"expected a batch of shape (n, channels, height, width), "
            f"got ndim={images.ndim}"
        )
    if images.shape[0] == 0:
        return images.copy()
    return np.stack(transform_batch(images, key))
