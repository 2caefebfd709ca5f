"""Adam with decoupled weight decay, operating on flat parameter tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class OptimConfig:
    # 0.01 (the full-scale setting) diverges on the toy task without
    # normalization layers; 1e-3 is stable at these widths
    lr: float = 1e-3
    weight_decay: float = 3e-5
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in (self.beta1, self.beta2):
            if not 0 <= b < 1:
                raise ValueError("moment coefficients must be in [0, 1)")


def init_state(params: dict) -> dict:
    return {"step": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, cfg: OptimConfig) -> dict:
    """One in-place update; iteration order is name-sorted, so deterministic."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param {p.data.shape} "
                             f"for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update
    return state


def collect_grads(params: dict) -> dict:
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()
