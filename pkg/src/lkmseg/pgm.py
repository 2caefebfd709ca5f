"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import IoError


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise IoError(f"PGM needs a 2D array, got shape {arr.shape}")
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
            fh.write(arr.tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise IoError(str(e)) from e
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise IoError(f"not a maxval-255 P5 PGM: {path}")
    w, h = int(parts[1]), int(parts[2])
    pixels = parts[4][:w * h]
    if len(pixels) < w * h:
        raise IoError(f"truncated PGM: {path}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def mask_to_pgm(mask: np.ndarray, num_classes: int) -> np.ndarray:
    scale = 255 // max(1, num_classes - 1)
    return mask.astype(np.int64) * scale


def image_to_pgm(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    return img * 255.0
