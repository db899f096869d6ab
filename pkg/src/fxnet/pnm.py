"""Binary 8-bit PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise PNMError("truncated header")
        out.append(blob[start:i])
    return out, i + 1  # exactly one whitespace byte follows maxval


def read_pnm(path) -> np.ndarray:
    """Return uint8 (H, W) for P5 or (H, W, 3) for P6."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    (w, h, maxval), offset = _tokens(blob[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PNMError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    data = blob[2 + offset:2 + offset + w * h * channels]
    if len(data) != w * h * channels:
        raise PNMError(f"{path}: expected {w * h * channels} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_pgm(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 2:
        raise PNMError(f"{path}: expected a grayscale P5 image")
    return img


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
