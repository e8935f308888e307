"""Exact threshold-sweep metrics for voxel-wise anomaly scores.

Every curve is built from the distinct score values taken in descending
order; a voxel is called positive at threshold ``t`` when its score is
``>= t``.  Tied scores therefore move together, giving diagonal ROC/PRO
segments and single precision-recall steps.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import MetricError, ShapeError


@dataclass
class ScoredVoxels:
    scores: np.ndarray
    labels: np.ndarray
    flat_index: np.ndarray = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ShapeError("scores and labels must have equal lengths")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")

    @classmethod
    def from_map(cls, amap, lesion_mask):
        lesion_mask = np.asarray(lesion_mask, dtype=bool)
        if lesion_mask.shape != amap.scores.shape:
            raise ShapeError("lesion mask does not match the anomaly map")
        valid = amap.valid_mask
        return cls(amap.scores[valid], lesion_mask[valid], np.flatnonzero(valid.ravel()))


@dataclass
class LesionSet:
    """Lesion components as arrays of flat voxel indices."""

    components: list = field(default_factory=list)
    connectivity: int = 26
    shape: tuple = None

    @property
    def sizes(self):
        return [len(c) for c in self.components]


_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


def connected_components(lesion_mask, connectivity=26):
    mask = np.asarray(lesion_mask, dtype=bool)
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError("connectivity must be 6, 18 or 26")
    if mask.ndim != 3:
        raise ShapeError("lesion mask must be 3-D")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labelled, n = ndimage.label(mask, structure=structure)
    flat = labelled.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    comps = [order[bounds[k] : bounds[k + 1]] for k in range(n)]
    return LesionSet(comps, connectivity, mask.shape)


def _require_both(labels):
    p = int(labels.sum())
    if p == 0 or p == len(labels):
        raise MetricError("curve metrics need at least one positive and one negative voxel")
    return p, len(labels) - p


def _sweep(scores):
    """Descending order plus the end index (exclusive) of each tie group."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) + 1
    return order, ends, s[ends - 1]


def _area(x, y, xmax):
    """Trapezoid area under the polyline (x, y) for x in [0, xmax]; x[0] must be 0."""
    if xmax >= x[-1]:
        return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))
    k = int(np.searchsorted(x, xmax, side="left"))  # x[k-1] < xmax <= x[k]
    full = np.sum((x[1:k] - x[: k - 1]) * (y[1:k] + y[: k - 1]) * 0.5)
    y_cut = y[k - 1] + (y[k] - y[k - 1]) * (xmax - x[k - 1]) / (x[k] - x[k - 1])
    return float(full + (xmax - x[k - 1]) * (y[k - 1] + y_cut) * 0.5)


def roc_curve(sv):
    p, n = _require_both(sv.labels)
    order, ends, thresholds = _sweep(sv.scores)
    tp = np.cumsum(sv.labels[order])[ends - 1]
    fp = ends - tp
    fpr = np.r_[0.0, fp / n]
    tpr = np.r_[0.0, tp / p]
    return fpr, tpr, thresholds


def roc_auc(sv, fpr_max=1.0, normalize=True):
    """Area under the ROC curve up to ``fpr_max``, divided by ``fpr_max`` by default."""
    if not 0 < fpr_max <= 1:
        raise ValueError("fpr_max must be in (0, 1]")
    fpr, tpr, _ = roc_curve(sv)
    area = _area(fpr, tpr, fpr_max)
    return area / fpr_max if normalize else area


def pr_auc(sv):
    """Average precision: sum over thresholds of recall gain times precision."""
    p = int(sv.labels.sum())
    if p == 0:
        raise MetricError("precision-recall needs at least one positive voxel")
    order, ends, _ = _sweep(sv.scores)
    tp = np.cumsum(sv.labels[order])[ends - 1]
    precision = tp / ends
    recall = tp / p
    gain = np.diff(np.r_[0.0, recall])
    return float(np.sum(gain * precision))


def _lesion_ids(sv, lesions):
    """Component id (0..L-1) for each scored voxel, -1 for background."""
    ids = np.full(len(sv.scores), -1, dtype=np.int64)
    if sv.flat_index is None:
        for k, comp in enumerate(lesions.components):
            ids[np.asarray(comp, dtype=np.int64)] = k
        return ids
    for k, comp in enumerate(lesions.components):
        comp = np.asarray(comp, dtype=np.int64)
        loc = np.searchsorted(sv.flat_index, comp)
        loc = np.clip(loc, 0, len(sv.flat_index) - 1)
        hit = sv.flat_index[loc] == comp
        ids[loc[hit]] = k
    return ids


def pro_curve(sv, lesions):
    """(fpr, pro, thresholds): mean per-lesion overlap against false-positive rate."""
    ids = _lesion_ids(sv, lesions)
    present = np.unique(ids[ids >= 0])
    if len(present) == 0:
        raise MetricError("per-region overlap needs at least one lesion")
    negatives = ids < 0
    n = int(negatives.sum())
    if n == 0:
        raise MetricError("per-region overlap needs at least one negative voxel")
    order, ends, thresholds = _sweep(sv.scores)
    fp = np.cumsum(negatives[order])[ends - 1]
    overlap = np.zeros(len(ends))
    for k in present:
        member = ids[order] == k
        overlap += np.cumsum(member)[ends - 1] / int(member.sum())
    pro = overlap / len(present)
    return np.r_[0.0, fp / n], np.r_[0.0, pro], thresholds


def pro_auc(sv, lesions, fpr_max=1.0, normalize=True):
    if not 0 < fpr_max <= 1:
        raise ValueError("fpr_max must be in (0, 1]")
    fpr, pro, _ = pro_curve(sv, lesions)
    area = _area(fpr, pro, fpr_max)
    return area / fpr_max if normalize else area


def best_dice(sv):
    """Maximum Dice over distinct-score thresholds; ties resolve to the lowest threshold."""
    p = int(sv.labels.sum())
    if p == 0:
        raise MetricError("Dice needs at least one positive voxel")
    order, ends, thresholds = _sweep(sv.scores)
    tp = np.cumsum(sv.labels[order])[ends - 1]
    dice = 2.0 * tp / (ends + p)
    best = dice.max()
    k = int(np.flatnonzero(dice == best)[-1])
    return float(best), float(thresholds[k])


def dice_at(sv, threshold):
    pred = sv.scores >= threshold
    tp = int(np.sum(pred & sv.labels))
    return 2.0 * tp / (int(pred.sum()) + int(sv.labels.sum()))
