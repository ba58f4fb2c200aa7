"""Binary PPM (P6) / PGM (P5) images, 8-bit, mapped to [0, 1] floats."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dasrf.errors import FormatError


def _to_bytes(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, image) -> None:
    """``image`` is (H, W) in [0, 1]."""
    img = _to_bytes(image)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2D image, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, image) -> None:
    """``image`` is (3, H, W) or (1, H, W) in [0, 1]; single channel is replicated."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise FormatError(f"PPM needs a (C, H, W) image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise FormatError(f"PPM needs 1 or 3 channels, got {img.shape[0]}")
    data = _to_bytes(img).transpose(1, 2, 0)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_header(blob: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Returns (C, H, W) floats in [0, 1]."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _read_header(blob)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError("only 8-bit images are supported")
    if magic == b"P5":
        data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset).reshape(1, h, w)
    elif magic == b"P6":
        data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=offset).reshape(h, w, 3).transpose(2, 0, 1)
    else:
        raise FormatError(f"unsupported magic {magic!r}")
    return data.astype(np.float64) / 255.0
