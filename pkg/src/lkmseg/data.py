"""Synthetic multi-class blob scenes, the desk-scale segmentation task.

Each scene places a few non-overlapping disks per foreground class on a
background. Class intensities are separated but noisy, so a model has to
combine intensity with shape cues. Generation is deterministic from the
config seed; every scene draws from its own child stream so the corpus is
identical whether scenes are produced serially or in parallel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GenError


@dataclass
class SceneConfig:
    size: int = 64
    num_classes: int = 4               # background + (K-1) foreground classes
    blobs_per_class: tuple = (1, 3)    # inclusive range
    radius_range: tuple = (4, 10)
    intensity_means: tuple = ()        # per class; default spread if empty
    intensity_vars: tuple = ()         # per class pixel variance
    noise_level: float = 0.05
    seed: int = 0

    def means(self) -> np.ndarray:
        if self.intensity_means:
            m = np.asarray(self.intensity_means, dtype=np.float64)
        else:
            m = np.linspace(0.0, 1.0, self.num_classes)
        if m.size != self.num_classes:
            raise GenError(f"{m.size} intensity means for {self.num_classes} classes")
        return m

    def vars(self) -> np.ndarray:
        if self.intensity_vars:
            v = np.asarray(self.intensity_vars, dtype=np.float64)
        else:
            v = np.zeros(self.num_classes)
        if v.size != self.num_classes:
            raise GenError(f"{v.size} intensity variances for "
                           f"{self.num_classes} classes")
        return v


def _disk(size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_scene(cfg: SceneConfig, rng: np.random.Generator):
    """One (image [1,H,W], mask [H,W]) pair."""
    size = cfg.size
    mask = np.zeros((size, size), dtype=np.int64)
    attempts = 0
    for c in range(1, cfg.num_classes):
        n_blobs = int(rng.integers(cfg.blobs_per_class[0],
                                   cfg.blobs_per_class[1] + 1))
        for _ in range(n_blobs):
            while True:
                attempts += 1
                if attempts > 1000:
                    raise GenError("blob packing failed after 1000 attempts")
                r = int(rng.integers(cfg.radius_range[0], cfg.radius_range[1] + 1))
                cy = int(rng.integers(r, size - r))
                cx = int(rng.integers(r, size - r))
                disk = _disk(size, cy, cx, r)
                if not np.any(mask[disk]):
                    mask[disk] = c
                    break

    means = cfg.means()
    sigmas = np.sqrt(cfg.vars())
    img = means[mask]
    if np.any(sigmas > 0):
        img = img + sigmas[mask] * rng.standard_normal((size, size))
    if cfg.noise_level > 0:
        img = img + cfg.noise_level * rng.standard_normal((size, size))
    mu, sd = img.mean(), img.std()
    if sd > 0:
        img = (img - mu) / sd
    else:
        img = img - mu
    return img[None].astype(np.float64), mask


def generate_dataset(cfg: SceneConfig, count: int):
    """Deterministic list of (image, mask) pairs."""
    if count < 1:
        raise GenError("count must be >= 1")
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, i])
        scenes.append(generate_scene(cfg, rng))
    return scenes


def worker_count() -> int:
    """Parallelism cap from LKMSEG_THREADS (0 or unset = auto)."""
    raw = os.environ.get("LKMSEG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n
