"""Synthetic two-channel brain phantoms with known lesion ground truth.

Anatomy is deliberately crude: an ellipsoidal brain with a cortical shell
(pseudo grey matter), a white-matter core and two ventricle-like CSF
ellipsoids.  By default the brain is wider than the in-plane field of view,
like a tightly cropped scan, so most scored patches lie inside the brain.  Subjects share the layout up to a smooth displacement of at
most ``max_displacement`` voxels, and differ in tissue contrast, bias field
and noise.  Patients additionally carry hyperintense (channel 1) blobs in
white matter, away from the ventricles; optional decoy blobs can be placed
*inside* the CSF to exercise the exclusion post-processing.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateDataError, PlacementError
from .postproc import minmax_normalize
from .volume import Volume


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    brain_radii: tuple = (36.0, 36.0, 30.0)
    cortex_depth: float = 0.2  # fraction of the normalised radius
    ventricle_offset: float = 5.0
    ventricle_radii: tuple = (3.0, 8.0, 5.0)
    # (csf, grey, white) means for each channel; channel 0 is T1-like, 1 FLAIR-like
    t1_means: tuple = (0.20, 0.55, 0.80)
    flair_means: tuple = (0.10, 0.45, 0.40)
    tissue_std: float = 0.04  # between-subject spread of the tissue means
    bias_amplitude: float = 0.08
    noise_std: float = 0.02
    # smooth within-tissue heterogeneity, independent per channel
    texture_std: float = 0.05
    texture_scale: float = 1.5
    max_displacement: float = 2.0
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (2.5, 4.5)
    lesion_contrast: float = 4.5  # FLAIR lesion / white-matter ratio
    lesion_t1_factor: float = 0.95
    lesion_fraction: float = 0.0035
    # extra-cerebral shell (scalp/meninges stand-in), dark by default; a bright
    # rim pins the per-channel maximum of the min-max rescaling
    rim_thickness: float = 2.0
    rim_means: tuple = (0.0, 0.0)
    decoy_count: int = 0
    seg_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not 0 < self.lesion_fraction <= 0.05:
            raise ValueError("lesion_fraction must be in (0, 0.05]")
        if self.lesion_count[0] < 1 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError("lesion_count must be a (min, max) range with min >= 1")


@dataclass
class PhantomCase:
    volume: Volume
    brain_mask: np.ndarray
    csf_mask: np.ndarray
    lesion_mask: np.ndarray
    csf_segmentations: tuple = ()
    decoy_mask: np.ndarray = None
    role: str = "control"
    meta: dict = field(default_factory=dict)


def case_rng(cfg, role, index):
    """Generator for case ``index`` of ``role``; independent of generation order."""
    return np.random.default_rng([cfg.seed, {"control": 0, "patient": 1}[role], index])


def _smooth_field(rng, dims, n_waves=3):
    """Low-frequency random field scaled to [-1, 1]."""
    grids = np.meshgrid(*[np.arange(d) / d for d in dims], indexing="ij")
    f = np.zeros(dims)
    for _ in range(n_waves):
        freq = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        f += np.sin(2 * np.pi * sum(fr * g for fr, g in zip(freq, grids)) + phase)
    m = np.abs(f).max()
    return f / m if m > 0 else f


def _anatomy(cfg, rng):
    dims = cfg.dims
    grids = [np.arange(d, dtype=np.float64) for d in dims]
    x, y, z = np.meshgrid(*grids, indexing="ij")
    center = [(d - 1) / 2.0 for d in dims]
    # smooth warp, |displacement| <= max_displacement along each axis
    disp = [cfg.max_displacement * _smooth_field(rng, dims, 2) for _ in range(3)]
    xw, yw, zw = x + disp[0], y + disp[1], z + disp[2]
    rx, ry, rz = cfg.brain_radii
    rho = np.sqrt(((xw - center[0]) / rx) ** 2 + ((yw - center[1]) / ry) ** 2 + ((zw - center[2]) / rz) ** 2)
    theta = np.arctan2(yw - center[1], xw - center[0])
    brain = rho <= 1.0
    gm_edge = 1.0 - cfg.cortex_depth + 0.04 * np.sin(6 * theta) * np.cos(3 * np.pi * (zw - center[2]) / rz)
    grey = brain & (rho > gm_edge)
    vx, vy, vz = cfg.ventricle_radii
    csf = np.zeros(dims, dtype=bool)
    for side in (-1, 1):
        cx = center[0] + side * cfg.ventricle_offset
        csf |= ((xw - cx) / vx) ** 2 + ((yw - center[1]) / vy) ** 2 + ((zw - center[2]) / vz) ** 2 <= 1.0
    csf &= brain & ~grey
    white = brain & ~grey & ~csf
    if not brain.any():
        raise DegenerateDataError("phantom configuration produces an empty brain mask")
    r_scale = 1.0 + cfg.rim_thickness / min(cfg.brain_radii)
    rim = (rho > 1.0) & (rho <= r_scale)
    return brain, grey, white, csf, rim


def _blob(dims, center, radius, rng):
    axes = radius * rng.uniform(0.8, 1.2, size=3)
    lo = [max(0, int(np.floor(c - a - 1))) for c, a in zip(center, axes)]
    hi = [min(d, int(np.ceil(c + a + 2))) for c, a, d in zip(center, axes, dims)]
    sub = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    inside = sum(((g - c) / a) ** 2 for g, c, a in zip(sub, center, axes)) <= 1.0
    out = np.zeros(dims, dtype=bool)
    out[tuple(slice(a, b) for a, b in zip(lo, hi))] = inside
    return out


def _place_lesions(cfg, rng, brain, white, csf):
    target = cfg.lesion_fraction * brain.sum()
    # keep lesions inside white matter, clear of CSF and grey matter
    depth = ndimage.distance_transform_edt(white)
    csf_dist = ndimage.distance_transform_edt(~csf)
    lesions = np.zeros(brain.shape, dtype=bool)
    n_blobs = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    # radius giving n_blobs spheres of total volume `target`, kept inside the configured range
    r_lo, r_hi = cfg.lesion_radius
    r_fit = float(np.clip((3 * target / (4 * np.pi * n_blobs)) ** (1 / 3), r_lo, r_hi))
    for attempt in range(200):
        if lesions.sum() >= 0.9 * target:
            break
        radius = float(np.clip(r_fit * rng.uniform(0.85, 1.15), r_lo, r_hi))
        ok = (depth >= radius + 1.5) & (csf_dist >= radius + 2.5) & ~ndimage.binary_dilation(lesions, iterations=2)
        candidates = np.argwhere(ok)
        if len(candidates) == 0:
            continue
        c = candidates[rng.integers(len(candidates))]
        blob = _blob(brain.shape, c.astype(float), radius, rng) & white
        if lesions.sum() + blob.sum() > 1.3 * target:
            continue
        lesions |= blob
    frac = lesions.sum() / brain.sum()
    if not 0.5 * cfg.lesion_fraction <= frac <= 1.5 * cfg.lesion_fraction:
        raise PlacementError(
            f"placed lesion fraction {frac:.5f} outside +-50% of target {cfg.lesion_fraction}"
        )
    return lesions


def _place_decoys(cfg, rng, csf):
    decoys = np.zeros(csf.shape, dtype=bool)
    inner = ndimage.distance_transform_edt(csf)
    candidates = np.argwhere(inner >= 2.0)
    if cfg.decoy_count and len(candidates) == 0:
        raise PlacementError("CSF region too thin to host decoys")
    for _ in range(cfg.decoy_count):
        c = candidates[rng.integers(len(candidates))]
        decoys |= _blob(csf.shape, c.astype(float), 1.8, rng) & csf
    return decoys


def _render(cfg, rng, brain, grey, white, csf, rim, lesions=None, decoys=None):
    means = []
    for base, rim_mean in zip((cfg.t1_means, cfg.flair_means), cfg.rim_means):
        means.append([m + rng.normal(0, cfg.tissue_std) for m in base] + [rim_mean])
    channels = np.zeros((2,) + cfg.dims)
    for c in range(2):
        mc = means[c]
        ch = np.zeros(cfg.dims)
        ch[csf] = mc[0]
        ch[grey] = mc[1]
        ch[white] = mc[2]
        ch[rim] = mc[3]
        channels[c] = ch
    if lesions is not None:
        channels[1][lesions] = means[1][2] * cfg.lesion_contrast
        channels[0][lesions] = means[0][2] * cfg.lesion_t1_factor
    if decoys is not None and decoys.any():
        channels[1][decoys] = means[1][2] * cfg.lesion_contrast
        channels[0][decoys] = means[0][2] * cfg.lesion_t1_factor
    for c in range(2):
        if cfg.texture_std > 0:
            tex = ndimage.gaussian_filter(rng.normal(size=cfg.dims), cfg.texture_scale)
            tex *= cfg.texture_std / tex.std()
            healthy = (grey | white) if lesions is None else (grey | white) & ~lesions
            channels[c][healthy] += tex[healthy]
    clean = channels.copy()
    for c in range(2):
        bias = 1.0 + cfg.bias_amplitude * _smooth_field(rng, cfg.dims, 3)
        noise = rng.normal(0, cfg.noise_std, size=cfg.dims)
        channels[c] = np.where(brain | rim, channels[c] * bias + noise, 0.0)
    np.clip(channels, 0.0, None, out=channels)
    return minmax_normalize(Volume(channels)), clean, means


def _segmentations(cfg, rng, csf):
    # two imperfect CSF segmentations, standing in for two automated tissue models
    return tuple(csf & (rng.random(csf.shape) >= cfg.seg_dropout) for _ in range(2))


def generate_control(cfg, rng):
    rng = np.random.default_rng(rng)
    brain, grey, white, csf, rim = _anatomy(cfg, rng)
    volume, _, means = _render(cfg, rng, brain, grey, white, csf, rim)
    segs = _segmentations(cfg, rng, csf)
    return PhantomCase(volume, brain, csf, np.zeros_like(brain), segs, np.zeros_like(brain),
                       "control", {"tissue_means": means})


def generate_patient(cfg, rng):
    rng = np.random.default_rng(rng)
    brain, grey, white, csf, rim = _anatomy(cfg, rng)
    lesions = _place_lesions(cfg, rng, brain, white, csf)
    decoys = _place_decoys(cfg, rng, csf)
    volume, clean, means = _render(cfg, rng, brain, grey, white, csf, rim, lesions, decoys)
    segs = _segmentations(cfg, rng, csf)
    meta = {"tissue_means": means, "clean": clean, "lesion_fraction": float(lesions.sum() / brain.sum())}
    return PhantomCase(volume, brain, csf, lesions, segs, decoys, "patient", meta)


def generate_dataset(cfg, n_controls, n_patients):
    controls = [generate_control(cfg, case_rng(cfg, "control", i)) for i in range(n_controls)]
    patients = [generate_patient(cfg, case_rng(cfg, "patient", i)) for i in range(n_patients)]
    return controls, patients
