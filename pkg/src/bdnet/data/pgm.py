"""8-bit binary PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    img = np.asarray(image, dtype=np.float64)
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"PGM payload must be a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    pos = 0
    tokens: list[int] = []

    def fail(msg: str):
        raise PGMError(f"{source}: {msg} at byte {pos}")

    if blob[:2] != b"P5":
        fail("missing P5 magic")
    pos = 2
    while len(tokens) < 3:
        if pos >= len(blob):
            fail("truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
            continue
        if ch.isspace():
            pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            fail(f"unexpected header byte {ch!r}")
        tokens.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        fail("header must end with a single whitespace byte")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (only 255)")
    if w < 1 or h < 1:
        fail(f"invalid extents {w}x{h}")
    need = w * h
    if len(blob) - pos != need:
        fail(f"expected {need} raster bytes, found {len(blob) - pos}")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode(pixels))


def read_pgm(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), str(path))


def write_image(path, image: np.ndarray) -> None:
    write_pgm(path, quantize(image))


def read_image(path) -> np.ndarray:
    return read_pgm(path).astype(np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.size and (m.min() < 0 or m.max() > 255):
        raise ValueError("mask class indices must fit in a byte")
    write_pgm(path, m.astype(np.uint8))


def read_mask(path) -> np.ndarray:
    return read_pgm(path)
