"""PFM and PNG image I/O.

PFM: 'PF' (color) / 'Pf' (grayscale) header, width height, scale line whose
sign encodes endianness (negative = little-endian), rows stored bottom-to-top
as float32. Round trips are bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["pfm_read", "pfm_write", "png_read", "png_write"]


def pfm_write(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim == 2:
        header = b"Pf"
        data = image.astype("<f4")
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        data = image.astype("<f4")
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) images")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def pfm_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        nxt = _next_token(raw, pos)
        if nxt is None:
            raise ValueError("truncated PFM header")
        token, pos = nxt
        parts.append(token)
    magic, w, h, scale = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
    if magic not in (b"PF", b"Pf"):
        raise ValueError(f"not a PFM file (magic {magic!r})")
    channels = 3 if magic == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size != count:
        raise ValueError("truncated PFM payload")
    image = data.reshape(h, w, channels)[::-1]
    if abs(scale) not in (0.0, 1.0):
        image = image * abs(scale)
    image = image.astype(np.float64)
    return image[..., 0] if channels == 1 else image


def _next_token(raw: bytes, pos: int):
    while pos < len(raw) and raw[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(raw) and not raw[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        return None
    return raw[start:pos], pos + 1  # consume the single whitespace after the token


def png_write(path, image: np.ndarray):
    """Write uint8 PNG from an image already in display range [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def png_read(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1] (grayscale stays 2-D)."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr
