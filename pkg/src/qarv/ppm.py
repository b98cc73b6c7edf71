"""Binary PPM (P6) and PGM (P5) reading/writing, 8-bit only.

PGM images are expanded to RGB on load so downstream code always sees
(H, W, 3) uint8.  Pixels map to [0, 1] via /255.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmError("unexpected end of header")
    return buf[start:pos], pos


def read_image(path: str) -> np.ndarray:
    """Load a P5/P6 file as (H, W, 3) uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise PpmError(f"{path}: unsupported magic {magic!r}, need binary P5 or P6")
    w_tok, pos = _read_token(buf, pos)
    h_tok, pos = _read_token(buf, pos)
    maxval_tok, pos = _read_token(buf, pos)
    width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    if maxval != 255:
        raise PpmError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise PpmError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise PpmError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img.copy()


def write_image(path: str, img: np.ndarray) -> None:
    """Write (H, W, 3) uint8 as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise PpmError(f"need (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def to_float(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8 (round half away handled by rint)."""
    arr = np.clip(np.asarray(chw, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
