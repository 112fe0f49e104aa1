"""Label assignment and evaluation: IOU, modified IOU, exhaustive branch
matching, and precision/recall AUC.

Branches of an unsupervised run carry no names, so evaluation first
searches for the branch-to-label mapping that maximizes mean IOU: plain
mode assigns each ground-truth label its own branch (injective), modified
mode may union several ground-truth labels into one branch, which tolerates
coarser segmentations. Per-shape IOUs are averaged over the evaluation set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .model import BaeNet
from .sampling import grid_coords
from .shapes import RasterShape

OCCUPANCY_THRESHOLD = 0.5

MAX_BRANCHES = 12
MAX_LABELS = 6


def label_points(net: BaeNet, code, points) -> np.ndarray:
    """Argmax branch per point; ties go to the lowest branch index."""
    vals = net.branch_values(code, points)
    return np.argmax(vals, axis=1)


def label_point(net: BaeNet, code, point) -> int:
    return int(label_points(net, code, np.asarray(point, dtype=np.float32)[None])[0])


def label_grid_from_code(net: BaeNet, code, dims,
                         threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
    """Per-cell predicted labels in {0..k}: 0 where the pooled field is
    below the occupancy threshold, else argmax branch + 1."""
    pts = grid_coords(dims)
    out = np.zeros(int(np.prod(dims)), dtype=np.uint8)
    for lo in range(0, pts.shape[0], 8192):
        vals = net.branch_values(code, pts[lo : lo + 8192])
        pooled = vals.max(axis=1)
        lab = np.argmax(vals, axis=1).astype(np.uint8) + 1
        lab[pooled < threshold] = 0
        out[lo : lo + 8192] = lab
    return out.reshape(tuple(dims))


def label_grid(net: BaeNet, shape: RasterShape,
               threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
    return label_grid_from_code(net, net.feature_code(shape.occupancy), shape.dims, threshold)


# -- IOU machinery -----------------------------------------------------------


def _pair_counts(pred: np.ndarray, gt: np.ndarray, k: int, n_labels: int):
    """Per-shape intersection matrix [k+1, L+1] plus predicted/gt part sizes."""
    if pred.shape != gt.shape:
        raise DimensionError(f"grid dims differ: {pred.shape} vs {gt.shape}")
    combined = pred.astype(np.int64).reshape(-1) * (n_labels + 1) + gt.astype(np.int64).reshape(-1)
    counts = np.bincount(combined, minlength=(k + 1) * (n_labels + 1))
    return counts.reshape(k + 1, n_labels + 1)


def _subset_scores(preds, gts, k: int, n_labels: int) -> np.ndarray:
    """score[b, mask] = mean over shapes of IOU(branch b, union of gt labels
    in the bit mask). Empty-vs-empty counts as 1 (vacuous agreement)."""
    n_masks = 1 << n_labels
    total = np.zeros((k, n_masks))
    for pred, gt in zip(preds, gts):
        m = _pair_counts(pred, gt, k, n_labels)
        pred_size = m[1:].sum(axis=1)  # [k]
        gt_size = m[:, 1:].sum(axis=0)  # [L]
        inter = np.zeros((k, n_masks))
        gt_union = np.zeros(n_masks)
        for mask in range(1, n_masks):
            low = mask & -mask
            rest = mask ^ low
            lbl = low.bit_length() - 1
            inter[:, mask] = inter[:, rest] + m[1:, lbl + 1]
            gt_union[mask] = gt_union[rest] + gt_size[lbl]
        union = pred_size[:, None] + gt_union[None, :] - inter
        with np.errstate(invalid="ignore"):
            iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        iou[:, 0] = 0.0  # empty label set contributes nothing
        total += iou
    return total / len(preds)


@dataclass
class BranchAssignment:
    mode: str  # "iou" or "mod-iou"
    mapping: dict[int, tuple[int, ...]]  # branch -> gt labels it covers

    def lines(self) -> list[str]:
        out = []
        for b in sorted(self.mapping):
            labels = self.mapping[b]
            tgt = str(labels[0]) if len(labels) == 1 else "{" + ",".join(map(str, labels)) + "}"
            out.append(f"{b}->{tgt}")
        return out


@dataclass
class IouReport:
    mode: str
    per_part: dict[str, float]
    mean: float
    assignment: BranchAssignment


@dataclass
class AucReport:
    per_part: dict[int, float]
    point_count: int


def _enumerate_maps(k: int, n_labels: int) -> np.ndarray:
    """All label -> branch maps as an int array [k^L, L]."""
    grids = np.indices((k,) * n_labels).reshape(n_labels, -1).T
    return np.ascontiguousarray(grids)


def match_branches(preds, gts, mode: str = "iou") -> BranchAssignment:
    """Exhaustive search for the branch-to-label assignment that maximizes
    mean IOU over the evaluation set.

    preds/gts: equal-length lists of label grids (0 = background).
    """
    preds = list(preds)
    gts = list(gts)
    if not preds or len(preds) != len(gts):
        raise ParameterError("need equal, nonempty prediction and gt lists")
    if mode not in ("iou", "mod-iou"):
        raise ParameterError(f"unknown matching mode {mode!r}")
    k = int(max(p.max() for p in preds))
    n_labels = int(max(g.max() for g in gts))
    if n_labels < 1:
        raise ParameterError("ground truth has no labeled cells")
    k = max(k, 1)
    if k > MAX_BRANCHES or n_labels > MAX_LABELS:
        raise ParameterError(
            f"search space too large (k={k}, labels={n_labels}); restrict the "
            f"branch count to <= {MAX_BRANCHES} and labels to <= {MAX_LABELS}"
        )
    score = _subset_scores(preds, gts, k, n_labels)

    if mode == "iou":
        # injective label->branch; pad with zero-score dummy branches when k < L
        kk = max(k, n_labels)
        padded = np.zeros((kk, 2))
        maps = _enumerate_maps(kk, n_labels)
        distinct = np.all(np.diff(np.sort(maps, axis=1), axis=1) != 0, axis=1) \
            if n_labels > 1 else np.ones(len(maps), bool)
        maps = maps[distinct]
        per_label = np.zeros((len(maps), n_labels))
        for lbl in range(n_labels):
            col = maps[:, lbl]
            valid = col < k
            per_label[valid, lbl] = score[col[valid], 1 << lbl]
        totals = per_label.mean(axis=1)
        best = maps[int(np.argmax(totals))]
        mapping = {int(b): (lbl + 1,) for lbl, b in enumerate(best) if b < k}
        return BranchAssignment("iou", mapping)

    # mod mode: every label->branch map defines a partition into branch groups
    maps = _enumerate_maps(k, n_labels)
    n = len(maps)
    total = np.zeros(n)
    groups = np.zeros(n)
    for b in range(k):
        mask = np.zeros(n, dtype=np.int64)
        for lbl in range(n_labels):
            mask += (maps[:, lbl] == b) << lbl
        used = mask > 0
        total[used] += score[b, mask[used]]
        groups += used
    means = total / groups
    best = maps[int(np.argmax(means))]
    mapping: dict[int, list[int]] = {}
    for lbl, b in enumerate(best):
        mapping.setdefault(int(b), []).append(lbl + 1)
    return BranchAssignment("mod-iou", {b: tuple(v) for b, v in mapping.items()})


def per_shape_iou(pred: np.ndarray, gt: np.ndarray,
                  assignment: BranchAssignment) -> dict[str, float]:
    """IOU of each assigned part (or part group) on a single shape."""
    k = max([b for b in assignment.mapping] + [int(pred.max())]) if assignment.mapping else int(pred.max())
    n_labels = int(max([l for ls in assignment.mapping.values() for l in ls] + [int(gt.max())]))
    m = _pair_counts(pred, gt, max(k, 1), n_labels)
    pred_size = m[1:].sum(axis=1)
    gt_size = m[:, 1:].sum(axis=0)
    out = {}
    covered = set()
    for b, labels in assignment.mapping.items():
        inter = float(sum(m[b + 1, lbl] for lbl in labels))
        union = float(pred_size[b] + sum(gt_size[lbl - 1] for lbl in labels) - inter)
        out[_part_key(labels)] = inter / union if union > 0 else 1.0
        covered.update(labels)
    for lbl in range(1, n_labels + 1):  # unmatched gt labels score 0
        if lbl not in covered:
            out[_part_key((lbl,))] = 0.0
    return out


def _part_key(labels: tuple[int, ...]) -> str:
    return "+".join(str(l) for l in labels)


def iou_report(preds, gts, assignment: BranchAssignment) -> IouReport:
    """Per-part IOU averaged per shape then over shapes, plus the overall mean."""
    preds, gts = list(preds), list(gts)
    acc: dict[str, list[float]] = {}
    for pred, gt in zip(preds, gts):
        for part, v in per_shape_iou(pred, gt, assignment).items():
            acc.setdefault(part, []).append(v)
    per_part = {part: float(np.mean(vs)) for part, vs in sorted(acc.items())}
    return IouReport(assignment.mode, per_part, float(np.mean(list(per_part.values()))),
                     assignment)


# -- precision/recall AUC ------------------------------------------------------


def pr_auc(scores, gt_binary) -> float:
    """Area under the precision/recall curve.

    Operating points are computed at every distinct score threshold in
    descending order (ties grouped); the curve starts at (recall 0,
    precision 1) and the area is integrated trapezoidally over recall.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(gt_binary).astype(bool)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise DimensionError("scores and labels must be equal-length vectors")
    if not np.all(np.isfinite(s)):
        raise ParameterError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ContractError("precision/recall needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.nonzero(np.r_[s[:-1] != s[1:], True])[0]  # last index of each tie group
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    r = np.r_[0.0, recall]
    p = np.r_[1.0, precision]
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))


def part_probabilities(branch_values: np.ndarray) -> np.ndarray:
    """Per-point part probabilities: branch outputs normalized to unit sum."""
    v = np.asarray(branch_values, dtype=np.float64)
    total = v.sum(axis=1, keepdims=True)
    return v / np.maximum(total, 1e-30)


def auc_report(net: BaeNet, shapes, assignment: BranchAssignment) -> AucReport:
    """AUC of the normalized branch score for each assigned part, over the
    occupied cells of every shape."""
    label_to_branch: dict[int, int] = {}
    for b, labels in assignment.mapping.items():
        for lbl in labels:
            label_to_branch[lbl] = b
    all_probs: list[np.ndarray] = []
    all_gt: list[np.ndarray] = []
    for shape in shapes:
        if shape.gt_labels is None:
            raise ContractError("AUC evaluation needs ground-truth labels")
        code = net.feature_code(shape.occupancy)
        occ_idx = np.flatnonzero(shape.occupancy.reshape(-1) > 0)
        cells = np.stack(np.unravel_index(occ_idx, shape.dims), axis=1)
        pts = (cells + 0.5) / np.asarray(shape.dims) - 0.5
        vals = net.branch_values(code, pts.astype(np.float32))
        all_probs.append(part_probabilities(vals))
        all_gt.append(shape.gt_labels.reshape(-1)[occ_idx])
    probs = np.concatenate(all_probs, axis=0)
    gt = np.concatenate(all_gt, axis=0)
    per_part = {}
    for lbl, b in sorted(label_to_branch.items()):
        per_part[lbl] = pr_auc(probs[:, b], gt == lbl)
    return AucReport(per_part, int(gt.size))
