"""Atomic file writes and the binary PGM image format."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import DatasetError


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_pgm(path, image):
    """Store a [H, W] float image in [0, 1] as 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DatasetError("PGM writer expects a 2-D grayscale image")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def read_pgm(path):
    """Load a binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1                                        # single whitespace after maxval
    w, h, maxval = fields
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return arr.astype(np.float64) / float(maxval)
