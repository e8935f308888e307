"""Single-file NIfTI-1 (.nii / .nii.gz) reading and writing.

Only what the pipeline needs: 3-D masks and maps, and 4-D multi-channel
volumes stored with the channel as the fourth axis.  Orientation fields are
written as a plain scaling affine and otherwise ignored.
"""
import gzip
import os
import struct

import numpy as np

from ..errors import BadMagicError, FormatError, MaskValueError, PayloadLengthError, UnsupportedDtypeError
from ..volume import AnomalyMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\0"

# field layout of the 348-byte header, in order
_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

# datatype code -> (numpy dtype, bitpix)
DTYPES = {2: (np.uint8, 8), 4: (np.int16, 16), 16: (np.float32, 32)}
CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}


def _pack(fields, endian="<"):
    values = []
    for name, fmt in _FIELDS:
        v = fields[name]
        if fmt[0].isdigit() and not fmt.endswith("s"):
            values.extend(v)
        else:
            values.append(v)
    return struct.pack(endian + _FORMAT, *values)


def _unpack(raw, endian):
    flat = struct.unpack(endian + _FORMAT, raw)
    out, k = {}, 0
    for name, fmt in _FIELDS:
        if fmt[0].isdigit() and not fmt.endswith("s"):
            n = int(fmt[:-1])
            out[name] = flat[k : k + n]
            k += n
        else:
            out[name] = flat[k]
            k += 1
    return out


def make_header(shape, dtype, voxel_size=(1.0, 1.0, 1.0), description=""):
    """Header fields for an array of ``shape`` (3-D, or 4-D with channels last)."""
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise UnsupportedDtypeError(f"cannot write payload dtype {dtype}")
    if len(shape) not in (3, 4):
        raise FormatError(f"only 3-D and 4-D arrays are supported, got shape {shape}")
    dim = [len(shape)] + [int(s) for s in shape] + [1] * (7 - len(shape))
    code = CODES[dtype]
    sx, sy, sz = (float(v) for v in voxel_size)
    return {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0, "dim": dim,
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0, "intent_code": 0,
        "datatype": code, "bitpix": DTYPES[code][1], "slice_start": 0,
        "pixdim": [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0],
        "vox_offset": float(VOX_OFFSET), "scl_slope": 0.0, "scl_inter": 0.0,
        "slice_end": 0, "slice_code": 0, "xyzt_units": 2,  # millimetres
        "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0, "toffset": 0.0,
        "glmax": 0, "glmin": 0, "descrip": description.encode("ascii", "replace")[:80],
        "aux_file": b"", "qform_code": 0, "sform_code": 1,
        "quatern_b": 0.0, "quatern_c": 0.0, "quatern_d": 0.0,
        "qoffset_x": 0.0, "qoffset_y": 0.0, "qoffset_z": 0.0,
        "srow_x": [sx, 0.0, 0.0, 0.0], "srow_y": [0.0, sy, 0.0, 0.0], "srow_z": [0.0, 0.0, sz, 0.0],
        "intent_name": b"", "magic": MAGIC,
    }


def encode_nifti(array, voxel_size=(1.0, 1.0, 1.0), description=""):
    """Bytes of a single-file NIfTI-1 image holding ``array`` (x fastest)."""
    array = np.asarray(array)
    header = make_header(array.shape, array.dtype, voxel_size, description)
    payload = np.asarray(array, dtype=array.dtype.newbyteorder("<")).tobytes(order="F")
    return _pack(header) + b"\0\0\0\0" + payload


def _is_gzip(path):
    return str(path).endswith(".gz")


def _write_bytes(path, data):
    tmp = f"{path}.partial"
    try:
        with open(tmp, "wb") as fh:
            if _is_gzip(path):
                # fixed timestamp and empty name keep the output byte-identical across runs
                with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                    gz.write(data)
            else:
                fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _read_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise PayloadLengthError(f"{path}: corrupt or truncated gzip stream ({exc})") from exc
    return data


def decode_nifti(data, source="<bytes>"):
    """(array, header) from NIfTI-1 bytes; the array is in (x, y, z[, t]) order."""
    if len(data) < HEADER_SIZE:
        raise PayloadLengthError(f"{source}: {len(data)} bytes is shorter than a NIfTI-1 header")
    raw = data[:HEADER_SIZE]
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise BadMagicError(f"{source}: sizeof_hdr is not {HEADER_SIZE}; not a NIfTI-1 file")
    hdr = _unpack(raw, endian)
    if hdr["magic"] != MAGIC:
        raise BadMagicError(f"{source}: magic {hdr['magic']!r}, expected {MAGIC!r}")
    code = hdr["datatype"]
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"{source}: datatype code {code} is not supported")
    dtype, bitpix = DTYPES[code]
    if hdr["bitpix"] != bitpix:
        raise UnsupportedDtypeError(f"{source}: bitpix {hdr['bitpix']} does not match datatype {code}")
    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{source}: invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise FormatError(f"{source}: non-positive dimension in {shape}")
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise FormatError(f"{source}: vox_offset {offset} lies inside the header")
    expected = int(np.prod(shape)) * bitpix // 8
    available = len(data) - offset
    if available != expected:
        raise PayloadLengthError(
            f"{source}: payload has {available} bytes, dims {shape} need {expected}"
        )
    arr = np.frombuffer(data, dtype=np.dtype(dtype).newbyteorder(endian), count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F").astype(dtype)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        arr = arr * np.float64(slope) + np.float64(inter)
    return arr, hdr


def write_array(array, path, voxel_size=(1.0, 1.0, 1.0), description=""):
    _write_bytes(path, encode_nifti(array, voxel_size, description))


def read_array(path):
    return decode_nifti(_read_bytes(path), str(path))


def write_volume(obj, path, dtype=np.float32):
    """Write a Volume (channels on the 4th axis) or a boolean mask (uint8)."""
    if isinstance(obj, Volume):
        data = np.moveaxis(obj.channels, 0, -1)
        if data.shape[-1] == 1:
            data = data[..., 0]
        write_array(np.asarray(data, dtype=dtype), path, obj.voxel_size_mm, "volume")
        return
    mask = np.asarray(obj)
    if mask.dtype != bool and not np.all((mask == 0) | (mask == 1)):
        raise MaskValueError("masks must only contain 0 and 1")
    write_array(mask.astype(np.uint8), path, description="mask")


def _as_mask(arr, source):
    if arr.ndim != 3:
        raise FormatError(f"{source}: masks must be 3-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        bad = np.unique(arr[(arr != 0) & (arr != 1)])[:5]
        raise MaskValueError(f"{source}: mask values outside {{0, 1}}: {bad.tolist()}")
    return arr.astype(bool)


def read_volume(path, kind=None):
    """Volume (float data) or boolean mask (uint8 data, or ``kind="mask"``)."""
    arr, hdr = read_array(path)
    if kind is None:
        kind = "mask" if hdr["datatype"] == 2 else "volume"
    if kind == "mask":
        return _as_mask(arr, path)
    if kind != "volume":
        raise ValueError(f"unknown kind {kind!r}")
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise FormatError(f"{path}: volumes must be 3-D or 4-D, got shape {arr.shape}")
    voxel = tuple(float(v) for v in hdr["pixdim"][1:4])
    return Volume(np.moveaxis(arr.astype(np.float64), -1, 0), voxel)


def read_mask(path):
    return read_volume(path, kind="mask")


def write_anomaly_map(amap, path, voxel_size=(1.0, 1.0, 1.0)):
    """Single-channel float32 map; voxels outside the valid mask are stored as NaN."""
    data = np.where(amap.valid_mask, amap.scores, np.nan).astype(np.float32)
    write_array(data, path, voxel_size, "anomaly map")


def read_anomaly_map(path):
    arr, _ = read_array(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: anomaly maps must be 3-D, got shape {arr.shape}")
    valid = np.isfinite(arr)
    return AnomalyMap(np.where(valid, arr, 0.0).astype(np.float64), valid)
