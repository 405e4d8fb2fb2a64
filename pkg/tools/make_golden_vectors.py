#!/usr/bin/env python3
"""Regenerate tests/data/blockwise_golden_v1.txt from first principles.

This script is an independent oracle for the keyed block-wise image
transformation. It deliberately imports nothing from the package and uses no
numpy: every expected output value is derived per scalar with plain Python
arithmetic, and the block decomposition is an explicit per-pixel loop that
looks up the key bit by within-block coordinate. Any disagreement between
this file and the package implementation is therefore a real bug in one of
two unrelated code paths, not a shared mistake.

Rules being encoded:
  - quantize: q = floor(x * 255 + 0.5), computed in float64
  - invert:   q ^ 255 when the key bit for this coordinate is 1
  - rescale:  y = q / 255
  - the key bit for pixel (ch, row, col) of a (c, h, w) image with block
    size M is bits[ch*M*M + (row % M)*M + (col % M)]; the same key tiles
    all blocks.

Output format, one record per line:
    M c h w | x0 x1 ... | b0 b1 ... | y0 y1 ...
where the x/y vectors hold c*h*w scalars in image order (channel, then row,
then column) and the bit vector holds c*M*M entries. Floats are written with
repr() so parsing with float() reproduces them bit-exactly.

Usage: python3 tools/make_golden_vectors.py [output-path]
"""

import math
import random
import sys
from pathlib import Path

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "blockwise_golden_v1.txt"


def transform_scalar(x: float, bit: int) -> float:
    q = math.floor(x * 255.0 + 0.5)
    if bit:
        q ^= 255
    return q / 255.0


def transform_image(pixels, m, c, h, w, bits):
    out = [0.0] * (c * h * w)
    for ch in range(c):
        for row in range(h):
            for col in range(w):
                i = ch * h * w + row * w + col
                k = ch * m * m + (row % m) * m + (col % m)
                out[i] = transform_scalar(pixels[i], bits[k])
    return out


def record(m, c, h, w, pixels, bits):
    assert len(pixels) == c * h * w and len(bits) == c * m * m
    assert h % m == 0 and w % m == 0
    assert all(0.0 <= x <= 1.0 for x in pixels)
    assert all(b in (0, 1) for b in bits)
    ys = transform_image(pixels, m, c, h, w, bits)
    return "{} {} {} {} | {} | {} | {}".format(
        m, c, h, w,
        " ".join(repr(x) for x in pixels),
        " ".join(str(b) for b in bits),
        " ".join(repr(y) for y in ys),
    )


def main(out_path: Path) -> None:
    rng = random.Random(20260816)
    lines = [
        "# Golden vectors for the keyed block-wise negative/positive transform.",
        "# Generated by tools/make_golden_vectors.py; do not edit by hand.",
        "# record: M c h w | pixels (c*h*w, image order) | key bits (c*M*M) | expected",
    ]

    # Worked reference example: a single 2x2 single-channel block.
    lines.append(record(2, 1, 2, 2, [0.0, 1.0, 0.2, 0.6], [1, 0, 1, 0]))

    # Quantization boundaries: exact grid points k/255 and the half-way
    # points (k + 0.5)/255 where floor(x*255 + 0.5) changes value.
    grid = [k / 255.0 for k in (0, 1, 2, 127, 128, 253, 254, 255)]
    halfway = [min(1.0, (k + 0.5) / 255.0) for k in (0, 1, 126, 127, 253, 254)]
    for chunk in (grid[:4], grid[4:], halfway[:4], halfway[2:]):
        lines.append(record(2, 1, 2, 2, chunk, [rng.randint(0, 1) for _ in range(4)]))

    # Degenerate bit patterns: all zeros (pure quantization) and all ones.
    xs = [rng.random() for _ in range(12)]
    lines.append(record(2, 3, 2, 2, xs, [0] * 12))
    lines.append(record(2, 3, 2, 2, xs, [1] * 12))

    # Randomized single-block records across block sizes and channel counts.
    for m in (1, 2, 3, 4):
        for c in (1, 3):
            for _ in range(4):
                n = c * m * m
                pixels = [rng.random() for _ in range(n)]
                bits = [rng.randint(0, 1) for _ in range(n)]
                lines.append(record(m, c, m, m, pixels, bits))

    # Grid-aligned random records (inputs already multiples of 1/255), the
    # domain on which the transform is an involution.
    for m in (1, 2, 4):
        for c in (1, 3):
            for _ in range(2):
                n = c * m * m
                pixels = [rng.randint(0, 255) / 255.0 for _ in range(n)]
                bits = [rng.randint(0, 1) for _ in range(n)]
                lines.append(record(m, c, m, m, pixels, bits))

    # Multi-block images: the key pattern must tile across blocks.
    for m, c, h, w in ((2, 1, 4, 6), (2, 3, 4, 4), (3, 1, 6, 3), (4, 3, 8, 4)):
        pixels = [rng.random() for _ in range(c * h * w)]
        bits = [rng.randint(0, 1) for _ in range(c * m * m)]
        lines.append(record(m, c, h, w, pixels, bits))

    # Non-square blocks of extremes only, exercising 0 <-> 255 inversion.
    for _ in range(4):
        pixels = [rng.choice((0.0, 1.0)) for _ in range(12)]
        bits = [rng.randint(0, 1) for _ in range(12)]
        lines.append(record(2, 3, 2, 2, pixels, bits))

    n_records = sum(1 for s in lines if not s.startswith("#"))
    if n_records < 50:
        raise SystemExit(f"only {n_records} records generated; need at least 50")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {n_records} records to {out_path}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUT)
