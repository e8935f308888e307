from dataclasses import replace

import numpy as np
import pytest

from sae_ocsvm.errors import DegenerateDataError, PlacementError
from sae_ocsvm.io import read_mask, read_volume, write_volume
from sae_ocsvm.phantom import PhantomConfig, case_rng, generate_control, generate_dataset, generate_patient

CFG = PhantomConfig()


@pytest.fixture(scope="module")
def patient():
    return generate_patient(CFG, case_rng(CFG, "patient", 0))


@pytest.fixture(scope="module")
def control():
    return generate_control(CFG, case_rng(CFG, "control", 0))


def test_control_contract(control):
    assert control.volume.dims == (64, 64, 64) and control.volume.n_channels == 2
    assert not control.lesion_mask.any()
    ch = control.volume.channels
    np.testing.assert_array_equal(ch.min(axis=(1, 2, 3)), [0.0, 0.0])
    np.testing.assert_array_equal(ch.max(axis=(1, 2, 3)), [1.0, 1.0])
    assert control.brain_mask.any() and not np.any(control.csf_mask & ~control.brain_mask)


def test_determinism_and_case_independence():
    a = generate_control(CFG, case_rng(CFG, "control", 3))
    b = generate_control(CFG, case_rng(CFG, "control", 3))
    assert a.volume.channels.tobytes() == b.volume.channels.tobytes()
    c = generate_control(CFG, case_rng(CFG, "control", 4))
    assert not np.array_equal(a.volume.channels, c.volume.channels)
    controls, _ = generate_dataset(replace(CFG, dims=(40, 40, 40), brain_radii=(15, 16, 14)), 3, 0)
    alone = generate_control(replace(CFG, dims=(40, 40, 40), brain_radii=(15, 16, 14)),
                             case_rng(CFG, "control", 2))
    assert controls[2].volume.channels.tobytes() == alone.volume.channels.tobytes()


def test_patient_lesions(patient):
    les, brain, csf = patient.lesion_mask, patient.brain_mask, patient.csf_mask
    assert les.any()
    assert not np.any(les & ~brain) and not np.any(les & csf)
    frac = les.sum() / brain.sum()
    assert 0.00175 <= frac <= 0.00525
    # pre-noise channel-1 intensity equals the configured multiple of white matter
    clean = patient.meta["clean"][1]
    wm_mean = patient.meta["tissue_means"][1][2]
    np.testing.assert_allclose(clean[les], wm_mean * CFG.lesion_contrast)
    assert clean[les].mean() > clean[brain & ~les & ~csf].mean()


def test_mean_lesion_fraction_over_20_seeds():
    fr = [generate_patient(CFG, case_rng(CFG, "patient", i)).meta["lesion_fraction"] for i in range(20)]
    assert abs(np.mean(fr) - CFG.lesion_fraction) <= 0.2 * CFG.lesion_fraction


def test_layout_shared_up_to_small_deformation():
    a = generate_control(CFG, case_rng(CFG, "control", 0)).brain_mask
    b = generate_control(CFG, case_rng(CFG, "control", 1)).brain_mask
    dice = 2 * (a & b).sum() / (a.sum() + b.sum())
    assert dice > 0.9


def test_decoys_live_in_csf():
    cfg = replace(CFG, decoy_count=3)
    p = generate_patient(cfg, case_rng(cfg, "patient", 0))
    assert p.decoy_mask.any()
    assert not np.any(p.decoy_mask & ~p.csf_mask)
    assert not np.any(p.decoy_mask & p.lesion_mask)
    seg_a, seg_b = p.csf_segmentations
    assert not np.any((seg_a | seg_b) & ~p.csf_mask)


def test_config_errors():
    with pytest.raises(ValueError):
        PhantomConfig(lesion_fraction=0.0)
    with pytest.raises(ValueError):
        PhantomConfig(lesion_fraction=0.06)
    with pytest.raises(ValueError):
        PhantomConfig(lesion_count=(3, 2))
    with pytest.raises(DegenerateDataError):
        generate_control(PhantomConfig(brain_radii=(1e-3, 1e-3, 1e-3)), 0)
    # a brain with no white-matter room for lesions
    with pytest.raises(PlacementError):
        generate_patient(PhantomConfig(dims=(24, 24, 24), brain_radii=(8, 8, 8), cortex_depth=0.9), 0)


def test_phantom_round_trips_through_files(tmp_path, patient):
    write_volume(patient.volume, tmp_path / "v.nii.gz")
    write_volume(patient.lesion_mask, tmp_path / "l.nii.gz")
    back = read_volume(tmp_path / "v.nii.gz")
    # float32 storage: exact for the stored precision
    assert back.channels.tobytes() == patient.volume.channels.astype(np.float32).astype(np.float64).tobytes()
    np.testing.assert_array_equal(read_mask(tmp_path / "l.nii.gz"), patient.lesion_mask)
