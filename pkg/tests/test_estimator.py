"""Scikit-learn estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone

from lkmseg import LargeKernelMambaSegmenter
from lkmseg.data import SceneConfig, generate_dataset


def _corpus(count, seed=0):
    cfg = SceneConfig(size=16, num_classes=3, blobs_per_class=(1, 1),
                      radius_range=(2, 4), seed=seed)
    scenes = generate_dataset(cfg, count)
    X = np.stack([img for img, _ in scenes])
    y = np.stack([mask for _, mask in scenes])
    return X, y


def _est(**kw):
    base = dict(num_classes=3, stages=1, stem_channels=4, kernel_schedule=(2,),
                state_dim=2, epochs=3, batch_size=4, seed=0)
    base.update(kw)
    return LargeKernelMambaSegmenter(**base)


def test_get_params_roundtrip_and_clone():
    est = _est(lr=0.005)
    params = est.get_params()
    assert params["lr"] == 0.005
    assert params["kernel_schedule"] == (2,)
    c = clone(est)
    assert c.get_params() == params
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_fit_predict_shapes():
    X, y = _corpus(8)
    est = _est().fit(X, y)
    assert hasattr(est, "model_")
    assert len(est.loss_curve_) == 3
    pred = est.predict(X[:2])
    assert pred.shape == (2, 16, 16)
    assert pred.min() >= 0 and pred.max() < 3


def test_fit_accepts_3d_input():
    X, y = _corpus(4)
    est = _est(epochs=1).fit(X[:, 0], y)     # [n, H, W]
    assert est.predict(X[:2, 0]).shape == (2, 16, 16)


def test_fit_rejects_inconsistent_shapes():
    X, y = _corpus(4)
    with pytest.raises(ValueError):
        _est().fit(X, y[:, :8])
    with pytest.raises(ValueError):
        _est().fit(X[None], y)


def test_loss_curve_decreases():
    X, y = _corpus(16)
    est = _est(epochs=5).fit(X, y)
    assert est.loss_curve_[-1] < est.loss_curve_[0]


def test_score_in_unit_interval():
    X, y = _corpus(8)
    est = _est().fit(X, y)
    s = est.score(X, y)
    assert 0.0 <= s <= 1.0


def test_fit_deterministic():
    X, y = _corpus(8)
    a = _est().fit(X, y)
    b = _est().fit(X, y)
    assert a.loss_curve_ == b.loss_curve_
    assert np.array_equal(a.predict(X), b.predict(X))
