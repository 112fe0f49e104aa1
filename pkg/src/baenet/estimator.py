"""Scikit-learn style front end: fit a branched autoencoder on a shape
collection, then predict per-cell part labels or transform shapes to
feature codes. Hyperparameters live in the constructor so the estimator
clones and grid-searches like any other."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ParameterError
from .metrics import iou_report, label_grid, match_branches
from .model import PRESET_NAMES, build_preset
from .shapes import RasterShape
from .training import (TrainConfig, make_exemplar_set, train_oneshot, train_unsupervised,
                       train_weak)

MODES = ("unsupervised", "oneshot", "weak")


def as_raster_shapes(X) -> list[RasterShape]:
    """Validate and coerce input shapes: RasterShape instances or 0/1 grids."""
    shapes = []
    for i, x in enumerate(X):
        if isinstance(x, RasterShape):
            s = RasterShape(x.dims, x.occupancy, x.gt_labels, x.params, x.category, i)
        else:
            occ = np.asarray(x)
            if occ.ndim not in (2, 3):
                raise ParameterError(f"shape {i} must be a 2D or 3D grid, got ndim={occ.ndim}")
            if not np.isin(occ, (0, 1)).all():
                raise ParameterError(f"shape {i} occupancy must be 0/1")
            s = RasterShape(occ.shape, occ.astype(np.uint8), None, {}, "", i)
        if shapes and s.dims != shapes[0].dims:
            raise ParameterError("all shapes must share the same grid dims")
        shapes.append(s)
    if not shapes:
        raise ParameterError("empty shape collection")
    return shapes


class BaeNetSegmenter(BaseEstimator):
    """Co-segmentation estimator over a collection of occupancy grids.

    fit(X) trains the selected regime; predict(X) returns per-cell label
    grids (0 = background); transform(X) returns feature codes. For
    mode="oneshot", exemplar_ids selects the labeled shapes (their
    gt_labels drive the supervised loss); for mode="weak", y is the
    per-shape binary has-part tag.
    """

    def __init__(self, preset: str = "2d-toy", mode: str = "unsupervised",
                 branches: int | None = None, iterations: int = 20_000,
                 learning_rate: float = 1e-4, alpha: float = 1.0, l1_weight: float = 1e-5,
                 pretrain_iterations: int = 3_500, refine_iterations: int = 0,
                 points_per_shape: int = 0, exemplar_ids: tuple[int, ...] = (),
                 seed: int = 0):
        self.preset = preset
        self.mode = mode
        self.branches = branches
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.l1_weight = l1_weight
        self.pretrain_iterations = pretrain_iterations
        self.refine_iterations = refine_iterations
        self.points_per_shape = points_per_shape
        self.exemplar_ids = exemplar_ids
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, learning_rate=self.learning_rate, alpha=self.alpha,
            l1_weight=self.l1_weight, pretrain_iterations=self.pretrain_iterations,
            refine_iterations=self.refine_iterations, points_per_shape=self.points_per_shape,
            seed=self.seed, log_interval=0,
        )

    def fit(self, X, y=None):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.preset not in PRESET_NAMES:
            raise ParameterError(f"preset must be one of {PRESET_NAMES}")
        shapes = as_raster_shapes(X)
        cfg = self._config()
        res = shapes[0].dims[0]
        if self.mode == "oneshot":
            if not self.exemplar_ids:
                raise ParameterError("oneshot mode needs exemplar_ids")
            exemplars = make_exemplar_set(shapes, list(self.exemplar_ids), seed=self.seed)
            net = build_preset(self.preset, resolution=res,
                               branches=self.branches or exemplars.num_parts, seed=self.seed)
            self.reports_ = train_oneshot(net, shapes, exemplars, cfg)
        elif self.mode == "weak":
            if y is None:
                raise ParameterError("weak mode needs per-shape binary tags in y")
            net = build_preset(self.preset, resolution=res, branches=self.branches,
                               seed=self.seed)
            self.reports_ = train_weak(net, shapes, list(y), cfg)
        else:
            net = build_preset(self.preset, resolution=res, branches=self.branches,
                               seed=self.seed)
            self.reports_ = train_unsupervised(net, shapes, cfg)
        self.net_ = net
        self.n_branches_ = net.decoder.branches
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("fit the estimator before calling predict/transform")

    def predict(self, X) -> list[np.ndarray]:
        self._check_fitted()
        return [label_grid(self.net_, s) for s in as_raster_shapes(X)]

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return np.stack([self.net_.feature_code(s.occupancy) for s in as_raster_shapes(X)])

    def score(self, X, y=None) -> float:
        """Mean IOU after plain branch matching against ground-truth labels
        (taken from y, or from the shapes themselves)."""
        self._check_fitted()
        shapes = as_raster_shapes(X)
        gts = [np.asarray(g) for g in y] if y is not None else [s.gt_labels for s in shapes]
        if any(g is None for g in gts):
            raise ParameterError("score needs ground-truth label grids")
        preds = self.predict(X)
        return iou_report(preds, gts, match_branches(preds, gts, "iou")).mean
