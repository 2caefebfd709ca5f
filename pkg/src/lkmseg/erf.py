"""Effective receptive field: input-gradient magnitude of one output unit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import TargetError
from .model import Model
from .pgm import write_pgm


@dataclass
class ErfMap:
    """Max-normalized gradient magnitude over the input plane."""

    magnitude: np.ndarray  # [H, W], in [0, 1]


def _resolve_target(target, H: int, W: int):
    if target == "center":
        return H // 2, W // 2
    y, x = int(target[0]), int(target[1])
    if not (0 <= y < H and 0 <= x < W):
        raise TargetError(f"target ({y},{x}) outside {H}x{W} input")
    return y, x


def _raw_erf(model: Model, image: np.ndarray, target) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    H, W = image.shape[-2:]
    y, x = _resolve_target(target, H, W)
    inp = T.tensor(image[None], requires_grad=True)
    logits = model.forward(inp)
    loss = T.reduce_sum(logits[0, :, y, x])
    T.backward(loss)
    return np.abs(inp.grad[0]).sum(axis=0)


def compute_erf(model: Model, image: np.ndarray, target="center") -> ErfMap:
    """Gradient of the summed class logits at a target pixel w.r.t. the input.

    Magnitudes are summed over input channels and max-normalized to [0, 1].
    """
    mag = _raw_erf(model, image, target)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return ErfMap(magnitude=mag)


def average_erf(model: Model, images, target="center") -> ErfMap:
    """Mean of per-image gradient magnitudes, then max-normalized."""
    mag = None
    for img in images:
        m = _raw_erf(model, img, target)
        mag = m if mag is None else mag + m
    mag /= len(images)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return ErfMap(magnitude=mag)


def export_erf(erf: ErfMap, path) -> None:
    """Write the map as a binary PGM with linear 0..255 quantization."""
    write_pgm(path, erf.magnitude * 255.0)


def erf_support(erf: ErfMap, threshold: float = 1e-6) -> np.ndarray:
    return erf.magnitude > threshold
