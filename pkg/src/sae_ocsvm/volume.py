"""Volume-level data containers shared across the pipeline."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class Volume:
    """Multi-channel 3-D image, channels first: ``channels[c, x, y, z]``."""

    channels: np.ndarray
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 4:
            raise ShapeError(f"volume channels must be (C, X, Y, Z), got {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("volume contains non-finite values")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)

    @property
    def dims(self):
        return self.channels.shape[1:]

    @property
    def n_channels(self):
        return self.channels.shape[0]


@dataclass
class Patch:
    """Axial 2-D window of a volume, ``data`` is (channels, h, w)."""

    data: np.ndarray
    center: tuple
    subject_id: object = None


@dataclass
class PatchPair:
    x1: Patch
    x2: Patch

    def __post_init__(self):
        if tuple(self.x1.center) != tuple(self.x2.center):
            raise ValueError("paired patches must share their center")
        if self.x1.subject_id is not None and self.x1.subject_id == self.x2.subject_id:
            raise ValueError("paired patches must come from different subjects")


@dataclass
class AnomalyMap:
    """Per-voxel anomaly scores; larger means more anomalous."""

    scores: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.scores.shape, dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.scores.shape:
            raise ShapeError("valid_mask must match the score array")


def check_mask(mask, dims, what="mask"):
    mask = np.asarray(mask)
    if mask.shape != tuple(dims):
        raise ShapeError(f"{what} has shape {mask.shape}, expected {tuple(dims)}")
    return mask.astype(bool, copy=False)


def eligible_mask(mask, patch_size):
    """Mask voxels whose full axial patch lies inside the array."""
    mask = np.asarray(mask, dtype=bool)
    r = patch_size // 2
    out = np.zeros_like(mask)
    nx, ny = mask.shape[0], mask.shape[1]
    if nx - 2 * r <= 0 or ny - 2 * r <= 0:
        return out
    out[r : nx - r, r : ny - r, :] = mask[r : nx - r, r : ny - r, :]
    return out


def extract_patches(volume, centers, patch_size):
    """Stack of axial patches, shape (n, channels, patch_size, patch_size).

    Every window must lie fully inside the volume.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ShapeError(f"patch size must be a positive odd number, got {patch_size}")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    r = patch_size // 2
    nx, ny, nz = volume.dims
    xs, ys, zs = centers[:, 0], centers[:, 1], centers[:, 2]
    bad = (xs < r) | (xs + r >= nx) | (ys < r) | (ys + r >= ny) | (zs < 0) | (zs >= nz)
    if np.any(bad):
        first = tuple(int(v) for v in centers[np.argmax(bad)])
        raise ShapeError(f"patch of size {patch_size} at {first} falls outside volume {volume.dims}")
    win = np.lib.stride_tricks.sliding_window_view(volume.channels, (patch_size, patch_size), axis=(1, 2))
    # win[c, x0, y0, z, i, j] = channels[c, x0 + i, y0 + j, z]
    out = win[:, xs - r, ys - r, zs]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def extract_patch(volume, center, patch_size):
    data = extract_patches(volume, [center], patch_size)[0]
    return Patch(data=data, center=tuple(int(c) for c in center))
