import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from roteqnet.estimator import RotEqNetSegmenter, check_images, check_labels


def _data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, 64, 64)).astype(np.float32)
    y = np.where(x[:, 0] > 0.0, 7, 3)
    return x, y


def test_params_round_trip():
    est = RotEqNetSegmenter(nf=1, n_orientations=4, schedule=[[1, 0.01, 0.0]])
    params = est.get_params()
    assert params["nf"] == 1 and params["variant"] == "roteqnet"
    assert clone(est).get_params() == params
    est.set_params(variant="baseline")
    assert est.variant == "baseline"


def test_fit_predict_score():
    x, y = _data()
    est = RotEqNetSegmenter(nf=1, n_orientations=4, schedule=[[3, 0.01, 0.0]], batch_size=2, augment=False)
    est.fit(x, y)
    assert list(est.classes_) == [3, 7]
    proba = est.predict_proba(x)
    assert proba.shape == (4, 2, 64, 64)
    pred = est.predict(x[:, :, :40, :50])
    assert pred.shape == (4, 40, 50) and set(np.unique(pred)) <= {3, 7}
    assert 0.0 <= est.score(x, y) <= 1.0
    assert len(est.history_) == 3


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        RotEqNetSegmenter().predict(np.zeros((1, 3, 64, 64)))


def test_input_validation():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 2, 4, 4)), in_channels=3)
    assert check_images(np.zeros((3, 4, 4))).shape == (1, 3, 4, 4)
    x = np.zeros((2, 1, 4, 4))
    with pytest.raises(ValueError):
        check_labels(np.zeros((2, 4, 5), int), x)
    with pytest.raises(ValueError):
        check_labels(np.full((2, 4, 4), 0.5), x)
    with pytest.raises(ValueError):
        check_labels(np.full((2, 4, 4), 255), x)


def test_fit_rejects_single_class_and_bad_size():
    x, _ = _data(2)
    with pytest.raises(ValueError):
        RotEqNetSegmenter().fit(x, np.zeros((2, 64, 64), int))
    with pytest.raises(ValueError):
        RotEqNetSegmenter().fit(x[:, :, :50], np.tile([0, 1], (2, 50, 32)))
