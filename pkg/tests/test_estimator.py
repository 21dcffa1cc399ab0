import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import synthetic_images
from noveldec import DecoderEncoderDetector, check_images
from noveldec.exceptions import DataError, ShapeError


@pytest.fixture
def fitted(toy_config):
    est = DecoderEncoderDetector(config=toy_config.to_dict())
    return est.fit(synthetic_images(64, 8, 1, seed=0))


def test_check_images():
    x = check_images(np.zeros((2, 8, 8)))
    assert x.shape == (2, 1, 8, 8) and x.dtype == np.float32
    with pytest.raises(DataError):
        check_images(np.full((1, 1, 4, 4), 2.0))
    with pytest.raises(DataError):
        check_images(np.full((1, 1, 4, 4), np.nan))
    with pytest.raises(ShapeError):
        check_images(np.zeros(5))
    with pytest.raises(ShapeError):
        check_images(np.zeros((1, 1, 4, 4)), image_shape=(1, 8, 8))


def test_params_and_clone(toy_config):
    est = DecoderEncoderDetector(config=toy_config, ablation="no_mi", threshold_percentile=90.0)
    params = est.get_params()
    assert params["ablation"] == "no_mi" and params["threshold_percentile"] == 90.0
    assert clone(est).get_params()["config"] == toy_config
    with pytest.raises(NotFittedError):
        est.anomaly_score(np.zeros((1, 1, 8, 8)))


def test_fit_predict_contract(fitted):
    X = synthetic_images(10, 8, 1, seed=5)
    scores = fitted.anomaly_score(X)
    assert scores.shape == (10,) and (scores >= 0).all()
    np.testing.assert_allclose(fitted.score_samples(X), -scores)
    np.testing.assert_allclose(fitted.decision_function(X), fitted.threshold_ - scores)
    pred = fitted.predict(X)
    assert set(np.unique(pred)) <= {-1, 1}
    np.testing.assert_array_equal(pred == -1, scores > fitted.threshold_)
    assert fitted.transform(X).shape == (10, 8)
    assert len(fitted.history_) == 2


def test_threshold_is_train_percentile(fitted):
    train = synthetic_images(64, 8, 1, seed=0)
    assert fitted.threshold_ == pytest.approx(np.percentile(fitted.anomaly_score(train), 95.0))
    # roughly 5% of the training set lands above a 95th-percentile threshold
    assert (fitted.predict(train) == -1).mean() <= 0.1


def test_from_checkpoint(fitted, tmp_path):
    fitted.save(tmp_path / "m.pt")
    train = synthetic_images(64, 8, 1, seed=0)
    back = DecoderEncoderDetector.from_checkpoint(tmp_path / "m.pt", train)
    X = synthetic_images(5, 8, 1, seed=6)
    np.testing.assert_allclose(back.anomaly_score(X), fitted.anomaly_score(X), atol=1e-7)
    assert back.threshold_ == pytest.approx(fitted.threshold_)


def test_wrong_shape_rejected(fitted):
    with pytest.raises(ShapeError):
        fitted.predict(np.zeros((2, 1, 16, 16)))
