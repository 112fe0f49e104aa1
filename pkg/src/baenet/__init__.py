"""Branched implicit-field autoencoder for shape co-segmentation.

A shape collection is encoded to feature codes by a small CNN; a branched
three-layer decoder maps (code, point) to per-branch inside/outside fields
whose max-pool reconstructs the whole shape. Trained only to reconstruct,
the branches settle on recurring parts, which yields a co-segmentation.

Imports are lazy so the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tape": "autodiff",
    "Parameter": "autodiff",
    "Adam": "autodiff",
    "RasterShape": "shapes",
    "DatasetSpec": "shapes",
    "generate_dataset": "shapes",
    "read_raster": "shapes",
    "write_raster": "shapes",
    "SampleSet": "sampling",
    "sample_points": "sampling",
    "labeled_points_from_gt": "sampling",
    "EncoderConfig": "model",
    "DecoderConfig": "model",
    "BaeNet": "model",
    "TrainConfig": "training",
    "train_unsupervised": "training",
    "train_oneshot": "training",
    "train_weak": "training",
    "rebalance_for_weak_supervision": "training",
    "label_grid": "metrics",
    "match_branches": "metrics",
    "iou_report": "metrics",
    "pr_auc": "metrics",
    "BaeNetSegmenter": "estimator",
}


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'baenet' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(f".{module}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
