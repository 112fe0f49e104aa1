"""Estimator API surface: params round-trip, clone, fit/predict/transform shapes."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from baenet.errors import ParameterError
from baenet.estimator import BaeNetSegmenter, as_raster_shapes
from baenet.shapes import DatasetSpec, gen_elements


@pytest.fixture(scope="module")
def toy_shapes():
    return gen_elements(DatasetSpec("elements", count=5, seed=0))


class TestParams:
    def test_get_set_round_trip(self):
        est = BaeNetSegmenter(iterations=7, learning_rate=3e-4, seed=9)
        params = est.get_params()
        assert params["iterations"] == 7 and params["seed"] == 9
        est2 = BaeNetSegmenter().set_params(**params)
        assert est2.get_params() == params

    def test_clone(self):
        est = BaeNetSegmenter(preset="2d-toy", iterations=3, exemplar_ids=(0,))
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert c is not est


class TestValidation:
    def test_accepts_arrays_and_shapes(self, toy_shapes, rng):
        occ = (rng.random((3, 16, 16)) < 0.2).astype(np.uint8)
        shapes = as_raster_shapes(list(occ))
        assert shapes[1].shape_id == 1 and shapes[0].dims == (16, 16)
        shapes = as_raster_shapes(toy_shapes)
        assert shapes[2].gt_labels is not None

    def test_rejects_mixed_dims(self, rng):
        with pytest.raises(ParameterError):
            as_raster_shapes([np.zeros((8, 8)), np.zeros((16, 16))])

    def test_rejects_non_binary(self):
        with pytest.raises(ParameterError):
            as_raster_shapes([np.full((8, 8), 3)])

    def test_not_fitted(self, toy_shapes):
        with pytest.raises(NotFittedError):
            BaeNetSegmenter().predict(toy_shapes)

    def test_bad_mode(self, toy_shapes):
        with pytest.raises(ParameterError):
            BaeNetSegmenter(mode="psychic").fit(toy_shapes)

    def test_oneshot_needs_exemplars(self, toy_shapes):
        with pytest.raises(ParameterError):
            BaeNetSegmenter(mode="oneshot", iterations=1).fit(toy_shapes)

    def test_weak_needs_tags(self, toy_shapes):
        with pytest.raises(ParameterError):
            BaeNetSegmenter(mode="weak", iterations=1).fit(toy_shapes)


class TestFitPredict:
    def test_unsupervised_pipeline(self, toy_shapes):
        est = BaeNetSegmenter(iterations=6, points_per_shape=256, seed=0)
        assert est.fit(toy_shapes) is est
        assert est.n_branches_ == 4
        preds = est.predict(toy_shapes)
        assert len(preds) == 5 and preds[0].shape == (64, 64)
        assert preds[0].dtype == np.uint8 and preds[0].max() <= 4
        codes = est.transform(toy_shapes)
        assert codes.shape == (5, 16)
        s = est.score(toy_shapes)
        assert 0.0 <= s <= 1.0

    def test_oneshot_pipeline(self, toy_shapes):
        est = BaeNetSegmenter(mode="oneshot", iterations=5, pretrain_iterations=3,
                              points_per_shape=256, exemplar_ids=(0,), seed=1)
        est.fit(toy_shapes)
        assert est.n_branches_ == 3  # exemplar part count

    def test_weak_pipeline(self, toy_shapes):
        est = BaeNetSegmenter(mode="weak", iterations=4, refine_iterations=2,
                              points_per_shape=256, seed=2)
        est.fit(toy_shapes, y=[1, 0, 1, 0, 0])
        assert hasattr(est, "net_")
