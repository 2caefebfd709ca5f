"""Scikit-learn style estimator facade over the segmentation network.

Lets the model slot into sklearn pipelines and model-selection utilities:
constructor arguments are plain hyperparameters, ``fit(X, y)`` trains on
stacked images/masks, ``predict`` returns per-pixel class masks and
``score`` is the mean foreground Dice.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .metrics import mean_foreground_scores
from .model import ModelConfig, build_model, predict_mask
from .optim import OptimConfig, init_state
from .train import run_epoch


class LargeKernelMambaSegmenter(BaseEstimator):
    """Segmentation estimator with pixel/patch-level scan mixing.

    X is [n, H, W] or [n, C, H, W]; y is [n, H, W] integer masks with
    labels in [0, num_classes).
    """

    def __init__(self, num_classes: int = 4, stages: int = 3,
                 stem_channels: int = 16, kernel_schedule=(8, 4, 4),
                 use_pim: bool = True, use_pam: bool = True,
                 use_bim: bool = True, state_dim: int = 4,
                 lr: float = 0.01, weight_decay: float = 3e-5,
                 beta1: float = 0.99, beta2: float = 0.999,
                 epochs: int = 20, batch_size: int = 8, seed: int = 0):
        self.num_classes = num_classes
        self.stages = stages
        self.stem_channels = stem_channels
        self.kernel_schedule = kernel_schedule
        self.use_pim = use_pim
        self.use_pam = use_pam
        self.use_bim = use_bim
        self.state_dim = state_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _check_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ValueError(f"X must be [n,H,W] or [n,C,H,W], got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise ValueError(f"y shape {y.shape} inconsistent with X {X.shape}")

        cfg = ModelConfig(
            in_channels=X.shape[1], num_classes=self.num_classes,
            stages=self.stages, stem_channels=self.stem_channels,
            kernel_schedule=tuple(self.kernel_schedule),
            use_pim=self.use_pim, use_pam=self.use_pam, use_bim=self.use_bim,
            state_dim=self.state_dim)
        cfg.validate(X.shape[2:])
        ocfg = OptimConfig(lr=self.lr, weight_decay=self.weight_decay,
                           beta1=self.beta1, beta2=self.beta2,
                           epochs=self.epochs, batch_size=self.batch_size)

        self.model_ = build_model(cfg, self.seed)
        params = self.model_.named_params()
        state = init_state(params)
        scenes = list(zip(X, y))
        self.loss_curve_ = []
        for epoch in range(1, self.epochs + 1):
            order = np.random.default_rng([self.seed, 1000 + epoch]) \
                .permutation(len(scenes))
            self.loss_curve_.append(
                run_epoch(self.model_, params, scenes, order, state, ocfg))
        return self

    def predict(self, X) -> np.ndarray:
        X = self._check_X(X)
        return predict_mask(self.model_, X)

    def score(self, X, y) -> float:
        preds = self.predict(X)
        y = np.asarray(y, dtype=np.int64)
        scores = [mean_foreground_scores(p, g, self.num_classes)[0]
                  for p, g in zip(preds, y)]
        return float(np.mean(scores))
