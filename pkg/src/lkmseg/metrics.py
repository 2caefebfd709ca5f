"""Segmentation metrics: Dice overlap and normalized surface distance."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ShapeError


def dice_score(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """2|P n G| / (|P| + |G|) for class c; both empty counts as 1.0."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred == c
    g = gt == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of the region with a 4-neighbor outside it (image border counts)."""
    if not region.any():
        return np.zeros_like(region)
    interior = np.ones_like(region)
    interior[:-1] &= region[1:]
    interior[1:] &= region[:-1]
    interior[:, :-1] &= region[:, 1:]
    interior[:, 1:] &= region[:, :-1]
    # border pixels never have all four neighbors inside
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    return region & ~interior


def nsd_score(pred: np.ndarray, gt: np.ndarray, c: int, tol: float = 1.0) -> float:
    """Symmetric fraction of boundary pixels within tol of the other boundary.

    Boundaries use the 4-neighborhood membership-change rule; both masks
    empty of class c gives 1.0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    bp = _boundary(pred == c)
    bg = _boundary(gt == c)
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ + ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    dist_to_g = distance_transform_edt(~bg)
    dist_to_p = distance_transform_edt(~bp)
    hit = int((dist_to_g[bp] <= tol).sum()) + int((dist_to_p[bg] <= tol).sum())
    return hit / (np_ + ng)


def mean_foreground_scores(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                           tol: float = 1.0):
    """(mean DSC, mean NSD) over foreground classes 1..K-1."""
    ds = [dice_score(pred, gt, c) for c in range(1, num_classes)]
    ns = [nsd_score(pred, gt, c, tol) for c in range(1, num_classes)]
    return float(np.mean(ds)), float(np.mean(ns))
