"""Intensity normalisation and CSF-exclusion masks for anomaly maps."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateDataError, ShapeError
from .volume import AnomalyMap, Volume


@dataclass(frozen=True)
class StructuringElement:
    kind: str = "cross3d"
    radius: int = 1

    def __post_init__(self):
        if self.kind != "cross3d" or self.radius != 1:
            raise ValueError("only the radius-1 3-D cross is supported")

    @property
    def offsets(self):
        """Center plus the six face neighbours."""
        offs = [(0, 0, 0)]
        for ax in range(3):
            for s in (-1, 1):
                o = [0, 0, 0]
                o[ax] = s
                offs.append(tuple(o))
        return offs


CROSS = StructuringElement()


def minmax_normalize(volume):
    """Map every channel independently onto [0, 1]."""
    out = np.empty(volume.channels.shape, dtype=np.float64)
    for c, ch in enumerate(volume.channels):
        lo, hi = ch.min(), ch.max()
        if not hi > lo:
            raise DegenerateDataError(f"channel {c} is constant; cannot min-max normalise")
        out[c] = (ch - lo) / (hi - lo)
    return Volume(out, volume.voxel_size_mm)


def _shifted(mask, offset, fill):
    """``mask`` translated so that out[v] = mask[v + offset]; outside reads ``fill``."""
    out = np.full(mask.shape, fill, dtype=bool)
    src, dst = [], []
    for o, n in zip(offset, mask.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def dilate(mask, se=CROSS):
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for off in se.offsets:
        out |= _shifted(mask, off, False)
    return out


def erode(mask, se=CROSS):
    mask = np.asarray(mask, dtype=bool)
    out = np.ones_like(mask)
    for off in se.offsets:
        out &= _shifted(mask, off, False)
    return out


def morph(mask, op, se=CROSS):
    if op == "dilate":
        return dilate(mask, se)
    if op == "erode":
        return erode(mask, se)
    raise ValueError(f"unknown morphological operation {op!r}")


def close(mask, iterations=2, se=CROSS):
    """``iterations`` dilations followed by as many erosions."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = dilate(out, se)
    for _ in range(iterations):
        out = erode(out, se)
    return out


def convex_hull_mask(mask):
    """Voxels whose centres lie inside the convex hull of the mask's voxel centres."""
    mask = np.asarray(mask, dtype=bool)
    pts = np.argwhere(mask)
    if len(pts) == 0:
        raise DegenerateDataError("convex hull of an empty mask")
    # only voxels touching the background can be hull vertices
    surface = mask & ~erode(mask)
    try:
        hull = ConvexHull(np.argwhere(surface).astype(np.float64))
    except QhullError:
        # flat or tiny masks: the hull adds nothing beyond the voxels themselves
        return mask.copy()
    lo, hi = pts.min(axis=0), pts.max(axis=0) + 1
    grid = np.stack(
        np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1
    ).reshape(-1, 3).astype(np.float64)
    normals, offsets = hull.equations[:, :3], hull.equations[:, 3]
    inside = np.ones(len(grid), dtype=bool)
    for k in range(0, len(normals), 256):
        inside &= np.all(grid @ normals[k : k + 256].T + offsets[k : k + 256] <= 1e-9, axis=1)
    out = np.zeros_like(mask)
    out[tuple(slice(a, b) for a, b in zip(lo, hi))] = inside.reshape(tuple(hi - lo))
    return out | mask


def refine_csf_mask(seg_a, seg_b, gross_brain, se=CROSS):
    """Exclusion mask from two CSF segmentations and a gross brain mask.

    The masked union of the segmentations is closed (two dilations, two
    erosions) and joined with the one-voxel outer rim of the brain left by
    eroding its convex hull once.
    """
    seg_a, seg_b, brain = (np.asarray(m, dtype=bool) for m in (seg_a, seg_b, gross_brain))
    if not (seg_a.shape == seg_b.shape == brain.shape):
        raise ShapeError("segmentations and brain mask must share dimensions")
    if not brain.any():
        raise DegenerateDataError("gross brain mask is empty")
    csf = close((seg_a | seg_b) & brain, 2, se)
    rim = brain & ~erode(convex_hull_mask(brain), se)
    return csf | rim


def apply_exclusion(amap, exclusion):
    exclusion = np.asarray(exclusion, dtype=bool)
    if exclusion.shape != amap.scores.shape:
        raise ShapeError(f"exclusion mask {exclusion.shape} does not match map {amap.scores.shape}")
    scores = np.where(exclusion, 0.0, amap.scores)
    return AnomalyMap(scores, amap.valid_mask & ~exclusion)
