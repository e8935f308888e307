import gzip

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae_ocsvm.errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    MaskValueError,
    PayloadLengthError,
    ShapeError,
    UnsupportedDtypeError,
)
from sae_ocsvm.io import (
    format_config,
    load_ocsvm,
    load_patient_model,
    load_sae,
    parse_config,
    read_anomaly_map,
    read_mask,
    read_volume,
    save_ocsvm,
    save_patient_model,
    save_sae,
    write_anomaly_map,
    write_volume,
)
from sae_ocsvm.io.config import RunConfig
from sae_ocsvm.io.container import decode_container, encode_container
from sae_ocsvm.io.nifti import read_array, write_array
from sae_ocsvm.ocsvm import fit_ocsvm
from sae_ocsvm.pipeline import fit_patient_model
from sae_ocsvm.sae import SaeConfig, build_sae
from sae_ocsvm.volume import AnomalyMap, Volume

SMALL = ((3, 1, 3), (3, 1, 4), (3, 1, 5))


# NIfTI ---------------------------------------------------------------------------
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_volume_round_trip_is_bit_identical(tmp_path, suffix):
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((2, 5, 6, 7)).astype(np.float32), (1.0, 1.5, 2.0))
    path = tmp_path / f"v{suffix}"
    write_volume(vol, path)
    back = read_volume(path)
    assert back.channels.astype(np.float32).tobytes() == vol.channels.tobytes()
    assert back.voxel_size_mm == (1.0, 1.5, 2.0)


def test_header_fields_and_third_party_reader(tmp_path):
    arr = np.random.default_rng(1).random((64, 64, 64)).astype(np.float32)
    path = tmp_path / "a.nii.gz"
    write_array(arr, path, voxel_size=(0.9, 1.1, 1.3))
    _, hdr = read_array(path)
    assert tuple(hdr["dim"]) == (3, 64, 64, 64, 1, 1, 1, 1)
    img = nib.load(str(path))
    np.testing.assert_array_equal(np.asarray(img.dataobj), arr)
    np.testing.assert_allclose(img.header.get_zooms(), (0.9, 1.1, 1.3), rtol=1e-6)
    assert img.header["magic"] == b"n+1"


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
def test_reads_files_written_by_nibabel(tmp_path, dtype):
    arr = (np.random.default_rng(2).random((4, 5, 3)) * 100).astype(dtype)
    path = tmp_path / "n.nii"
    img = nib.Nifti1Image(arr, np.eye(4))
    img.header.set_data_dtype(dtype)
    nib.save(img, str(path))
    got, _ = read_array(path)
    np.testing.assert_array_equal(got, arr)


def test_mask_round_trip_and_validation(tmp_path):
    m = np.random.default_rng(3).random((6, 5, 4)) < 0.4
    write_volume(m, tmp_path / "m.nii.gz")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.nii.gz"), m)
    write_array(np.full((3, 3, 3), 2, dtype=np.uint8), tmp_path / "bad.nii")
    with pytest.raises(MaskValueError):
        read_mask(tmp_path / "bad.nii")
    with pytest.raises(MaskValueError):
        write_volume(np.full((2, 2, 2), 3), tmp_path / "x.nii")


def test_anomaly_map_round_trip_keeps_valid_count(tmp_path):
    rng = np.random.default_rng(4)
    valid = rng.random((7, 7, 7)) < 0.6
    amap = AnomalyMap(np.where(valid, rng.normal(size=valid.shape), 0.0), valid)
    write_anomaly_map(amap, tmp_path / "s.nii.gz")
    back = read_anomaly_map(tmp_path / "s.nii.gz")
    assert back.valid_mask.sum() == valid.sum()
    np.testing.assert_array_equal(back.valid_mask, valid)
    np.testing.assert_array_equal(back.scores, amap.scores.astype(np.float32))


def test_distinct_errors(tmp_path):
    path = tmp_path / "v.nii"
    write_array(np.zeros((4, 4, 4), np.float32), path)
    data = path.read_bytes()
    (tmp_path / "trunc.nii").write_bytes(data[:-9])
    with pytest.raises(PayloadLengthError):
        read_array(tmp_path / "trunc.nii")
    (tmp_path / "magic.nii").write_bytes(data[:344] + b"ni1\0" + data[348:])
    with pytest.raises(BadMagicError):
        read_array(tmp_path / "magic.nii")
    bad_dtype = bytearray(data)
    bad_dtype[70:72] = (64).to_bytes(2, "little")  # float64 code
    (tmp_path / "dt.nii").write_bytes(bytes(bad_dtype))
    with pytest.raises(UnsupportedDtypeError):
        read_array(tmp_path / "dt.nii")
    (tmp_path / "short.nii").write_bytes(data[:100])
    with pytest.raises(PayloadLengthError):
        read_array(tmp_path / "short.nii")
    (tmp_path / "gz.nii.gz").write_bytes(gzip.compress(data)[:-20])
    with pytest.raises(PayloadLengthError):
        read_array(tmp_path / "gz.nii.gz")
    with pytest.raises(UnsupportedDtypeError):
        write_array(np.zeros((2, 2, 2)), tmp_path / "f64.nii")


def test_gzip_output_is_reproducible(tmp_path):
    arr = np.random.default_rng(5).random((5, 5, 5)).astype(np.float32)
    write_array(arr, tmp_path / "a.nii.gz")
    write_array(arr, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert not any(p.name.endswith(".partial") for p in tmp_path.iterdir())


# containers -------------------------------------------------------------------------
def test_sae_container_round_trip(tmp_path):
    model = build_sae(SaeConfig(patch_size=7, blocks=SMALL, seed=4))
    save_sae(model, tmp_path / "m.sae")
    back = load_sae(tmp_path / "m.sae")
    assert back.chain == model.chain and back.config == model.config
    assert back.fingerprint() == model.fingerprint()
    x = np.random.default_rng(0).random((3, 2, 7, 7)).astype(np.float32)
    np.testing.assert_array_equal(back.encode_batch(x), model.encode_batch(x))


def test_container_corruption_is_detected(tmp_path):
    model = build_sae(SaeConfig(patch_size=7, blocks=SMALL))
    save_sae(model, tmp_path / "m.sae")
    data = (tmp_path / "m.sae").read_bytes()
    with pytest.raises(PayloadLengthError):
        decode_container(data[:-4])
    with pytest.raises(PayloadLengthError):
        decode_container(data + b"\0\0\0\0")
    with pytest.raises(BadMagicError):
        decode_container(b"X" + data[1:])
    tampered = data.replace(b"chain = (7, 5, 3, 1)", b"chain = (7, 5, 3, 2)")
    assert tampered != data
    (tmp_path / "t.sae").write_bytes(tampered)
    with pytest.raises(ShapeError):
        load_sae(tmp_path / "t.sae")
    save_ocsvm(fit_ocsvm(np.random.default_rng(0).normal(size=(30, 3)), 0.2), tmp_path / "o.svm")
    with pytest.raises(FormatError):
        load_sae(tmp_path / "o.svm")


def test_generic_container_round_trip():
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)}
    kind, meta, back = decode_container(encode_container("x", {"k": 0.1, "t": (1, 2)}, tensors))
    assert kind == "x" and meta == {"k": 0.1, "t": (1, 2)}
    np.testing.assert_array_equal(back["a"], tensors["a"])
    assert back["s"].shape == () and back["s"] == 2.5


def test_ocsvm_and_patient_containers(tmp_path):
    Z = np.random.default_rng(1).normal(size=(80, 4)).astype(np.float32).astype(np.float64)
    m = fit_ocsvm(Z, 0.1)
    save_ocsvm(m, tmp_path / "o.svm")
    back = load_ocsvm(tmp_path / "o.svm")
    assert back.rho == m.rho and back.gamma == m.gamma and back.nu == m.nu
    np.testing.assert_allclose(back.alphas, m.alphas, rtol=1e-6)
    # dual constraints are re-validated on load
    meta = {"gamma": m.gamma, "nu": m.nu, "rho": m.rho, "n_train": m.n_train}
    bad = encode_container("ocsvm", meta, {"alphas": 2 * m.alphas, "support_vectors": m.support_vectors})
    (tmp_path / "bad.svm").write_bytes(bad)
    with pytest.raises(FormatError):
        load_ocsvm(tmp_path / "bad.svm")

    enc = build_sae(SaeConfig(patch_size=7, blocks=SMALL))
    vol = Volume(np.random.default_rng(2).random((2, 14, 14, 3)))
    pm = fit_patient_model(vol, np.ones(vol.dims, bool), enc, n=60, rng=0)
    save_patient_model(pm, tmp_path / "p.model", seed=3)
    got = load_patient_model(tmp_path / "p.model")
    assert got.encoder_ref == pm.encoder_ref
    np.testing.assert_array_equal(got.sampled_locations, pm.sampled_locations)


# config ----------------------------------------------------------------------------------
def test_config_defaults():
    cfg = parse_config("")
    assert cfg.ocsvm.nu == 0.03 and cfg.ocsvm.n_train == 500
    assert cfg.sae.patch_size == 15 and cfg.sae.epochs == 30 and cfg.sae.batch_size == 1000


def test_config_fixed_point_and_overrides():
    text = "# comment\nsae.epochs = 3\nphantom.dims = (32, 32, 16)\nmetrics.bonferroni = true\nrun.n_pairs = 100\n"
    cfg = parse_config(text)
    assert cfg.sae.epochs == 3 and cfg.phantom.dims == (32, 32, 16) and cfg.metrics.bonferroni is True
    once = format_config(cfg)
    assert format_config(parse_config(once)) == once
    assert parse_config(once) == cfg
    assert format_config(RunConfig()) == format_config(parse_config(""))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 99), st.floats(0.001, 1.0), st.floats(0.0, 10.0), st.sampled_from([6, 18, 26]))
def test_config_round_trip_property(epochs, nu, alpha, conn):
    text = f"sae.epochs = {epochs}\nocsvm.nu = {nu!r}\nsae.alpha = {alpha!r}\nmetrics.connectivity = {conn}\n"
    cfg = parse_config(text)
    assert parse_config(format_config(cfg)) == cfg
    assert cfg.ocsvm.nu == nu and cfg.sae.alpha == alpha


@pytest.mark.parametrize("text", [
    "sae.nonsense = 1", "bogus.epochs = 1", "epochs = 1", "sae.epochs 3",
    "sae.epochs = 1\nsae.epochs = 2", "sae.epochs = 'many'", "ocsvm.nu = 0", "metrics.bonferroni = 1",
])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)
