import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from mms.estimators import ColumnProbe, MMSPretrainer
from mms.validation import check_images


def test_get_set_params_and_clone():
    est = MMSPretrainer(epochs=2, strategies=("span",))
    params = est.get_params()
    assert params["epochs"] == 2 and params["strategies"] == ("span",)
    c = clone(est).set_params(epochs=5)
    assert c.epochs == 5 and est.epochs == 2
    assert ColumnProbe(lr=0.5).get_params()["lr"] == 0.5


def test_check_images_inputs(words):
    arr = np.stack([w.image.data for w in words[:2]])
    assert len(check_images(arr)) == 2
    assert check_images(words[0].image)[0].data.shape == (32, 128, 3)
    assert check_images(np.zeros((1, 16, 64)))[0].data.shape == (32, 128, 3)
    with pytest.raises(ValueError):
        check_images(np.zeros((32, 128)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 32, 128, 3), np.nan))
    with pytest.raises(ValueError):
        check_images([])


def test_pretrainer_fit_transform(words, tmp_path):
    images = np.stack([w.image.data for w in words[:2]])
    est = MMSPretrainer(epochs=1, batch_size=2, warmup_steps=1, strategies=("random",))
    with pytest.raises(NotFittedError):
        est.transform(images)
    est.fit(images, out_dir=tmp_path)
    assert est.n_steps_ == 1 and (tmp_path / "final.mms").exists()
    assert est.transform(images).shape == (2, 32 * 64)
    assert est.set_params(pooling="cls").transform(images).shape == (2, 64)
    assert est.set_params(pooling="mean").transform(images).shape == (2, 64)
    with pytest.raises(ValueError):
        est.set_params(pooling="max").transform(images)
    loaded = MMSPretrainer.from_checkpoint(tmp_path / "final.mms")
    assert np.array_equal(loaded.set_params(pooling="cls").transform(images),
                          est.set_params(pooling="cls").transform(images))
    assert np.isfinite(est.score(images[:1]))


def test_probe_learns_separable_classes():
    g = np.random.default_rng(0)
    centers = g.standard_normal((4, 6)) * 4
    y = g.integers(0, 4, 400)
    X = centers[y] + g.standard_normal((400, 6)) * 0.3
    labels = np.array(["a", "b", "c", "d"])[y]
    p = ColumnProbe(epochs=40, batch_size=64, lr=0.05).fit(X, labels)
    assert p.score(X, labels) > 0.97
    assert set(p.predict(X[:5])) <= set("abcd")
    assert p.loss_curve_[-1] < p.loss_curve_[0]


def test_probe_in_pipeline_and_validation():
    X = np.r_[np.zeros((20, 2)), np.ones((20, 2))]
    y = np.r_[np.zeros(20), np.ones(20)]
    pipe = make_pipeline(ColumnProbe(epochs=30, batch_size=8, lr=0.1)).fit(X, y)
    assert pipe.score(X, y) == 1.0
    with pytest.raises(ValueError):
        ColumnProbe().fit(X, y[:3])


def test_probe_frozen_check_runs(tiny_params):
    X = np.random.default_rng(1).standard_normal((10, 3))
    ColumnProbe(epochs=1).fit(X, np.arange(10) % 2, frozen=tiny_params)
