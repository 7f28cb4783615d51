"""Binary PPM/PGM (P6/P5, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(buf: bytes):
    """Yield header tokens and the offset just past the last one consumed."""
    pos = 0
    n = len(buf)
    while True:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated header")
        yield buf[start:pos], pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Read P5/P6 into uint8 array of shape (C, H, W) with C in {1, 3}."""
    buf = Path(path).read_bytes()
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
        w, _ = next(toks)
        h, _ = next(toks)
        maxval, end = next(toks)
    except StopIteration as exc:
        raise PPMError(f"{path}: truncated header") from exc
    if magic not in (b"P5", b"P6"):
        raise PPMError(f"{path}: unsupported format {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PPMError(f"{path}: only 8-bit images supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    body = buf[end + 1 : end + 1 + w * h * c]
    if len(body) != w * h * c:
        raise PPMError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float64) / 255.0).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    """P6 image as float32 (3, H, W) in [0, 1]."""
    px = read_pnm(path)
    if px.shape[0] != 3:
        raise PPMError(f"{path}: expected a P6 color image")
    return to_unit(px)


def read_mask(path: str | Path) -> np.ndarray:
    """P5 or P6 mask as float32 (1, H, W); any nonzero sample means 1."""
    px = read_pnm(path)
    return (px.max(axis=0, keepdims=True) > 0).astype(np.float32)


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] (or uint8) as P6."""
    img = np.asarray(img)
    px = img if img.dtype == np.uint8 else quantize(img)
    if px.ndim != 3 or px.shape[0] not in (1, 3):
        raise PPMError(f"cannot write image of shape {img.shape}")
    magic = b"P6" if px.shape[0] == 3 else b"P5"
    h, w = px.shape[1:]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + px.transpose(1, 2, 0).tobytes())
