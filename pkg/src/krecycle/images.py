"""Image input: CSV grids, binary PGM (P5), IDX files, and a builtin glyph.

The builtin test image is a deterministic blocky glyph rendered at any
requested size (28 by default), so experiments never need a dataset on
disk.  All readers return intensities scaled to [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .operators import ImageVector

__all__ = ["builtin_glyph", "load_image", "read_csv_image", "read_idx_image", "read_pgm"]


def builtin_glyph(size: int = 28) -> ImageVector:
    """A blocky digit-like glyph on a size x size canvas.

    Rectangles are laid out on a 28 x 28 design grid and rescaled with
    integer rounding, so the image is bit-identical across runs.
    """
    if size < 8:
        raise ValueError(f"glyph needs at least an 8 x 8 canvas, got {size}")
    img = np.zeros((size, size))

    def block(r0, r1, c0, c1, value):
        # design coordinates are in [0, 28)
        ra = int(round(r0 * size / 28.0))
        rb = max(ra + 1, int(round(r1 * size / 28.0)))
        ca = int(round(c0 * size / 28.0))
        cb = max(ca + 1, int(round(c1 * size / 28.0)))
        img[ra:rb, ca:cb] = value

    block(3, 7, 4, 24, 1.0)      # top bar
    block(7, 12, 19, 24, 1.0)    # upper right limb
    block(12, 16, 12, 21, 1.0)   # middle bar, shifted left
    block(16, 21, 8, 15, 1.0)    # lower limb
    block(21, 25, 5, 12, 1.0)    # foot
    block(9, 12, 5, 9, 0.5)      # gray accent
    return ImageVector.from_matrix(img)


def read_csv_image(path) -> ImageVector:
    """Plain-text grid of intensities, one image row per line."""
    mat = np.loadtxt(path, delimiter=",", ndmin=2)
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{path}: non-finite pixel values")
    return ImageVector.from_matrix(mat)


def read_pgm(path) -> ImageVector:
    """Binary PGM (magic P5), 8- or 16-bit, scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")

    # header tokens may be separated by whitespace and '#' comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval

    width, height, maxval = (int(t) for t in tokens)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size != count:
        raise ValueError(f"{path}: expected {count} pixels, found {data.size}")
    mat = data.astype(float).reshape(height, width) / float(maxval)
    return ImageVector.from_matrix(mat)


def read_idx_image(path, index: int = 0) -> ImageVector:
    """One image from an IDX file (the MNIST container format)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX file")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08 or ndim != 3:
        raise ValueError(f"{path}: expected an unsigned-byte 3-D IDX file")
    count, rows, cols = struct.unpack(">iii", raw[4:16])
    if not 0 <= index < count:
        raise ValueError(f"index {index} out of range for {count} images")
    offset = 16 + index * rows * cols
    data = np.frombuffer(raw, dtype="u1", count=rows * cols, offset=offset)
    mat = data.astype(float).reshape(rows, cols) / 255.0
    return ImageVector.from_matrix(mat)


def load_image(source: str) -> ImageVector:
    """Dispatch 'builtin', 'builtin:<size>', or a path by extension."""
    if source == "builtin":
        return builtin_glyph()
    if source.startswith("builtin:"):
        return builtin_glyph(int(source.split(":", 1)[1]))
    path = Path(source)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return read_csv_image(path)
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix in (".idx", ".idx3-ubyte") or path.name.endswith("-ubyte"):
        return read_idx_image(path)
    raise ValueError(f"unrecognized image source {source!r}")
