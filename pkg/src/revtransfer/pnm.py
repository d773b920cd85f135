"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PNMError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise PNMError(f"expected {magic.decode()} file, found {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise PNMError(f"only 8-bit files are supported (maxval {maxval})")
    return width, height, pos + 1


def _read(path, magic, channels):
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, offset = _read_header(data, magic)
    n = width * height * channels
    body = np.frombuffer(data, dtype=np.uint8, count=-1, offset=offset)
    if body.size < n:
        raise PNMError(f"{path}: expected {n} pixel bytes, found {body.size}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return body[:n].reshape(shape).copy()


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PNMError(f"PGM needs a 2-d array, got {pixels.shape}")
    _write(path, b"P5", pixels)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PNMError(f"PPM needs an H×W×3 array, got {rgb.shape}")
    _write(path, b"P6", rgb)


def _write(path, magic, arr):
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise PNMError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape[:2]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def grey_to_bytes(grey: np.ndarray) -> np.ndarray:
    return np.round(np.clip(grey, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_grey(path) -> np.ndarray:
    """Load a P5 file normalised to float32 in [0, 1]."""
    return read_pgm(path).astype(np.float32) / np.float32(255.0)


def write_grey(path, grey: np.ndarray) -> None:
    write_pgm(path, grey_to_bytes(grey))
