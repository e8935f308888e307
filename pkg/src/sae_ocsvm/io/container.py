"""Model container: a text header followed by little-endian float32 tensors.

Layout::

    SAEOCSVM-MODEL <version>\\n
    kind = <sae | ocsvm | patient>\\n
    <key> = <value>\\n            (hyperparameters, seed, shape chain, ...)
    tensor <name> <d0,d1,...> <offset> <nbytes>\\n
    ...
    end\\n
    <payload: concatenated tensors, offsets relative to the payload start>

Scalars in the header are written with ``repr`` so floats round-trip exactly.
"""
import ast
import os

import numpy as np

from ..errors import BadMagicError, FormatError, PayloadLengthError, ShapeError
from ..ocsvm import OcsvmModel
from ..pipeline import PatientModel
from ..sae import SaeConfig, build_sae, shape_chain

MAGIC = "SAEOCSVM-MODEL"
VERSION = 1
_SAE_KEYS = ("patch_size", "alpha", "epochs", "batch_size", "patches_per_subject",
             "validation_fraction", "seed", "blocks", "in_channels", "precision")


def _fmt(value):
    if isinstance(value, np.generic):
        value = value.item()
    return repr(value)


def encode_container(kind, meta, tensors):
    """Bytes of a container holding ``meta`` (str -> python literal) and ``tensors``."""
    lines = [f"{MAGIC} {VERSION}", f"kind = {kind}"]
    for key, value in meta.items():
        if "\n" in key or " " in key:
            raise FormatError(f"invalid header key {key!r}")
        lines.append(f"{key} = {_fmt(value)}")
    offset, blobs = 0, []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor {name} {shape or '-'} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs)


def decode_container(data, source="<bytes>"):
    """(kind, meta, tensors) from container bytes, with payload length checks."""
    first = data[: len(MAGIC)]
    if first != MAGIC.encode():
        raise BadMagicError(f"{source}: not a model container (magic {first!r})")
    end = data.find(b"\nend\n")
    if end < 0:
        raise FormatError(f"{source}: header terminator not found")
    header = data[: end + 1].decode("utf-8").splitlines()
    payload = data[end + 5 :]
    version = header[0].split()[1:]
    if version != [str(VERSION)]:
        raise FormatError(f"{source}: unsupported container version {version}")
    kind, meta, index = None, {}, []
    for line in header[1:]:
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"{source}: malformed tensor line {line!r}")
            _, name, shape, off, nbytes = parts
            shape = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            index.append((name, shape, int(off), int(nbytes)))
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"{source}: malformed header line {line!r}")
        if key == "kind":
            kind = value
        else:
            try:
                meta[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError) as exc:
                raise FormatError(f"{source}: cannot parse value of {key!r}") from exc
    tensors, expected = {}, 0
    for name, shape, off, nbytes in index:
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise PayloadLengthError(f"{source}: tensor {name} shape {shape} disagrees with {nbytes} bytes")
        if off != expected:
            raise FormatError(f"{source}: tensor {name} offset {off}, expected {expected}")
        if off + nbytes > len(payload):
            raise PayloadLengthError(f"{source}: payload truncated inside tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
        expected = off + nbytes
    if expected != len(payload):
        raise PayloadLengthError(f"{source}: payload is {len(payload)} bytes, index covers {expected}")
    return kind, meta, tensors


def _write(path, data):
    tmp = f"{path}.partial"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _read(path, want):
    with open(path, "rb") as fh:
        data = fh.read()
    kind, meta, tensors = decode_container(data, str(path))
    if kind != want:
        raise FormatError(f"{path}: container holds a {kind!r} model, expected {want!r}")
    return meta, tensors


# SAE -------------------------------------------------------------------------
def sae_payload(model):
    cfg = model.config
    meta = {f"sae.{k}": getattr(cfg, k) for k in _SAE_KEYS}
    meta["chain"] = tuple(model.chain)
    meta["latent_dim"] = model.latent_dim
    meta["fingerprint"] = model.fingerprint()
    return meta, model.state_dict()


def sae_from_payload(meta, tensors, source="<container>"):
    try:
        cfg = SaeConfig(**{k: meta[f"sae.{k}"] for k in _SAE_KEYS})
    except KeyError as exc:
        raise FormatError(f"{source}: missing SAE hyperparameter {exc}") from exc
    chain = tuple(shape_chain(cfg.patch_size, cfg.blocks))
    if tuple(meta.get("chain", ())) != chain:
        raise ShapeError(f"{source}: stored shape chain {meta.get('chain')} != rebuilt chain {chain}")
    model = build_sae(cfg)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise FormatError(f"{source}: tensor set mismatch ({missing[:4]})")
    for name, arr in expected.items():
        if np.shape(arr) != tensors[name].shape:
            raise ShapeError(f"{source}: tensor {name} has shape {tensors[name].shape}, expected {np.shape(arr)}")
    model.load_state_dict({k: v.astype(cfg.dtype) for k, v in tensors.items()})
    if meta.get("latent_dim") != model.latent_dim:
        raise ShapeError(f"{source}: latent_dim {meta.get('latent_dim')} != {model.latent_dim}")
    return model


def save_sae(model, path):
    meta, tensors = sae_payload(model)
    _write(path, encode_container("sae", meta, tensors))


def load_sae(path):
    meta, tensors = _read(path, "sae")
    return sae_from_payload(meta, tensors, str(path))


# OC-SVM ----------------------------------------------------------------------
def _ocsvm_meta(model):
    return {"gamma": float(model.gamma), "nu": float(model.nu), "rho": float(model.rho),
            "n_train": int(model.n_train), "objective": float(model.objective),
            "iterations": int(model.iterations), "kkt_residual": float(model.kkt_residual)}


def _ocsvm_from(meta, tensors, source):
    try:
        model = OcsvmModel(
            support_vectors=tensors["support_vectors"].astype(np.float64),
            alphas=tensors["alphas"].astype(np.float64),
            rho=meta["rho"], gamma=meta["gamma"], nu=meta["nu"], n_train=meta["n_train"],
            objective=meta.get("objective", float("nan")), iterations=meta.get("iterations", 0),
            kkt_residual=meta.get("kkt_residual", 0.0),
        )
    except KeyError as exc:
        raise FormatError(f"{source}: missing OC-SVM field {exc}") from exc
    if model.support_vectors.ndim != 2:
        raise ShapeError(f"{source}: support vectors must be a matrix")
    try:
        model.validate(atol=1e-5)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    return model


def save_ocsvm(model, path):
    tensors = {"alphas": model.alphas, "support_vectors": model.support_vectors}
    _write(path, encode_container("ocsvm", _ocsvm_meta(model), tensors))


def load_ocsvm(path):
    meta, tensors = _read(path, "ocsvm")
    return _ocsvm_from(meta, tensors, str(path))


def save_patient_model(pm, path, seed=None):
    meta = _ocsvm_meta(pm.ocsvm)
    meta["encoder_ref"] = pm.encoder_ref
    meta["seed"] = seed
    tensors = {"alphas": pm.ocsvm.alphas, "support_vectors": pm.ocsvm.support_vectors,
               "sampled_locations": np.asarray(pm.sampled_locations, dtype=np.float32)}
    _write(path, encode_container("patient", meta, tensors))


def load_patient_model(path):
    meta, tensors = _read(path, "patient")
    model = _ocsvm_from(meta, tensors, str(path))
    locs = tensors["sampled_locations"].astype(np.int64)
    return PatientModel(model, locs, meta["encoder_ref"])
