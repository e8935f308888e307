"""Per-patient normality models and whole-brain anomaly scoring.

Also hosts the per-voxel baseline, where every voxel gets its own one-class
SVM trained on the control latents found at that location.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, ModelMismatchError, ShapeError
from .ocsvm import SolverConfig, auto_gamma, decision_function, fit_ocsvm, fit_ocsvm_batch, RbfKernel
from .volume import AnomalyMap, check_mask, eligible_mask, extract_patches

SCORE_CHUNK = 4096


@dataclass(frozen=True)
class PatientModel:
    ocsvm: object
    sampled_locations: np.ndarray
    encoder_ref: str


def sample_training_locations(mask, n, patch_size, rng):
    """``n`` distinct voxels drawn uniformly from the eligible part of ``mask``."""
    rng = np.random.default_rng(rng)
    candidates = np.argwhere(eligible_mask(mask, patch_size))
    if len(candidates) < n:
        raise DegenerateDataError(f"mask has {len(candidates)} eligible voxels, {n} requested")
    pick = rng.choice(len(candidates), size=n, replace=False)
    return candidates[pick]


def _map_chunks(fn, chunks, threads):
    # results are placed by chunk index, so thread count never changes the output
    if threads <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def encode_locations(volume, centers, encoder, threads=1):
    """Latent vectors for patches centred on ``centers`` (m, 3)."""
    centers = np.asarray(centers).reshape(-1, 3)
    p = encoder.config.patch_size
    chunks = [centers[lo : lo + SCORE_CHUNK] for lo in range(0, len(centers), SCORE_CHUNK)]

    def run(c):
        return encoder.encode_batch(extract_patches(volume, c, p), chunk=SCORE_CHUNK)

    parts = _map_chunks(run, chunks, threads)
    if not parts:
        return np.empty((0, encoder.latent_dim), dtype=encoder.config.dtype)
    return np.concatenate(parts)


def fit_patient_model(volume, mask, encoder, nu=0.03, n=500, rng=None, solver=None):
    """Normality model estimated from ``n`` random patches of the patient itself."""
    mask = check_mask(mask, volume.dims)
    locations = sample_training_locations(mask, n, encoder.config.patch_size, rng)
    Z = encode_locations(volume, locations, encoder)
    model = fit_ocsvm(Z, nu, RbfKernel(auto_gamma(Z)), solver or SolverConfig())
    return PatientModel(model, locations, encoder.fingerprint())


def score_volume(volume, mask, encoder, patient_model, threads=1):
    """Anomaly map ``-f_p(z)`` on every eligible voxel of ``mask``."""
    if patient_model.encoder_ref != encoder.fingerprint():
        raise ModelMismatchError(
            f"patient model was fitted with encoder {patient_model.encoder_ref}, got {encoder.fingerprint()}"
        )
    mask = check_mask(mask, volume.dims)
    valid = eligible_mask(mask, encoder.config.patch_size)
    centers = np.argwhere(valid)
    chunks = [centers[lo : lo + SCORE_CHUNK] for lo in range(0, len(centers), SCORE_CHUNK)]
    p = encoder.config.patch_size

    def run(c):
        z = encoder.encode_batch(extract_patches(volume, c, p), chunk=SCORE_CHUNK)
        return -decision_function(patient_model.ocsvm, z)

    parts = _map_chunks(run, chunks, threads)
    scores = np.zeros(volume.dims, dtype=np.float64)
    if parts:
        scores[valid] = np.concatenate(parts)
    return AnomalyMap(scores, valid)


# per-voxel baseline -----------------------------------------------------------
def encode_region(volume, region, encoder, threads=1):
    """Latents for every voxel of ``region`` (already restricted to eligible voxels)."""
    return encode_locations(volume, np.argwhere(region), encoder, threads)


@dataclass
class VoxelwiseModels:
    """One OC-SVM per voxel of ``region`` (None where the control set is degenerate)."""

    region: np.ndarray
    models: list
    encoder_ref: str


def fit_voxelwise_models(control_latents, region, encoder_ref, nu=0.03, solver=None, chunk=4096):
    """Fit the per-voxel models from stacked control latents (S, m, d)."""
    control_latents = np.asarray(control_latents, dtype=np.float64)
    s, m, _ = control_latents.shape
    if s < 2:
        raise DegenerateDataError("the per-voxel baseline needs at least 2 controls")
    if m != int(np.count_nonzero(region)):
        raise ShapeError("control latents do not match the region size")
    per_voxel = control_latents.transpose(1, 0, 2)
    models = []
    for lo in range(0, m, chunk):
        models.extend(fit_ocsvm_batch(per_voxel[lo : lo + chunk], nu, solver=solver))
    return VoxelwiseModels(np.asarray(region, dtype=bool), models, encoder_ref)


def score_voxelwise(vw, volume, mask, encoder, threads=1):
    """Score a patient with the per-voxel models; degenerate voxels become invalid."""
    if vw.encoder_ref != encoder.fingerprint():
        raise ModelMismatchError("per-voxel models were fitted with a different encoder")
    mask = check_mask(mask, volume.dims)
    target = eligible_mask(mask, encoder.config.patch_size)
    if np.any(target & ~vw.region):
        raise ShapeError("patient voxels fall outside the region covered by the per-voxel models")
    region_index = np.full(volume.dims, -1, dtype=np.int64)
    region_index[vw.region] = np.arange(int(np.count_nonzero(vw.region)))
    centers = np.argwhere(target)
    z = encode_locations(volume, centers, encoder, threads)
    scores = np.zeros(volume.dims, dtype=np.float64)
    valid = np.zeros(volume.dims, dtype=bool)
    for (x, y, zc), latent in zip(centers, z):
        model = vw.models[region_index[x, y, zc]]
        if model is None:
            continue
        scores[x, y, zc] = -decision_function(model, latent)
        valid[x, y, zc] = True
    return AnomalyMap(scores, valid)


def fit_and_score_voxelwise(controls, encoder, volume, mask, nu=0.03, solver=None, threads=1):
    """Per-voxel baseline: one OC-SVM per patient voxel, trained on the controls."""
    if len(controls) < 2:
        raise DegenerateDataError("the per-voxel baseline needs at least 2 controls")
    mask = check_mask(mask, volume.dims)
    region = eligible_mask(mask, encoder.config.patch_size)
    for c in controls:
        if c.dims != volume.dims:
            raise ShapeError("controls must be co-registered with the patient volume")
    latents = np.stack([encode_region(c, region, encoder, threads) for c in controls])
    vw = fit_voxelwise_models(latents, region, encoder.fingerprint(), nu, solver)
    return score_voxelwise(vw, volume, mask, encoder, threads)
