"""Volume and field IO.

Two on-disk formats:

* NIfTI-1 (``.nii`` / ``.nii.gz``) for interchange, written and parsed
  directly (348-byte header, little-endian, Fortran voxel order, spacing
  in pixdim and an axis-aligned sform). Displacement fields are stored as
  4-D volumes with a trailing 3-vector axis, voxel-unit semantics noted in
  the header description.
* a minimal raw container (``.mwv``): magic, JSON header (shape, dtype,
  spacing, kind), then little-endian C-order payload. Useful where no
  imaging stack is available.

Reads are counted per kind (image / label / field) so tests and the
inference path can assert that segmentation masks were never touched.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .fieldops import DisplacementField, ImageVolume, LabelVolume

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}
_RAW_MAGIC = b"MWVOL01\n"

READ_COUNTS = {"image": 0, "label": 0, "field": 0}


def reset_read_counts():
    for k in READ_COUNTS:
        READ_COUNTS[k] = 0


def read_counts() -> dict:
    return dict(READ_COUNTS)


class _DeterministicGzipWriter(gzip.GzipFile):
    """Gzip writer with fixed mtime and no embedded filename, so identical
    payloads produce identical bytes on disk."""

    def __init__(self, path):
        self._raw = open(path, "wb")
        super().__init__(filename="", fileobj=self._raw, mode="wb", mtime=0)

    def close(self):
        try:
            super().close()
        finally:
            self._raw.close()


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        if "w" in mode:
            return _DeterministicGzipWriter(path)
        return gzip.open(path, mode)
    return open(path, mode)


def _nifti_header(shape, spacing, dtype, vector: bool, descrip: bytes) -> bytes:
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    ndim = 4 if vector else 3
    dim = [ndim, *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    if vector:
        struct.pack_into("<h", hdr, 68, 1007)  # vector intent
    code = _NIFTI_CODES.get(np.dtype(dtype))
    if code is None:
        raise DataError(f"unsupported NIfTI datatype {dtype}")
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    pixdim = [1.0, *spacing] + [1.0] * (7 - len(spacing))
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<80s", hdr, 148, descrip[:80])
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, spacing[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, spacing[2], 0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr)


def _write_nifti(path, arr: np.ndarray, spacing, vector: bool, descrip: bytes):
    arr = np.asarray(arr)
    if arr.dtype == np.int64:
        arr = arr.astype(np.int32)
    hdr = _nifti_header(arr.shape, spacing, arr.dtype, vector, descrip)
    with _open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(np.asfortranarray(arr).tobytes(order="F"))


def _read_nifti(path):
    with _open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise DataError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        raise DataError(f"{path}: not a little-endian NIfTI-1 file")
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", blob, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise DataError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    (dtype_code,) = struct.unpack_from("<h", blob, 70)
    dtype = _NIFTI_DTYPES.get(dtype_code)
    if dtype is None:
        raise DataError(f"{path}: unsupported NIfTI datatype code {dtype_code}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    # pixdim is float32 on disk; rounding restores mm-scale spacings exactly
    spacing = tuple(round(float(p), 5) for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset) if vox_offset else 352
    count = int(np.prod(shape))
    data = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"), count=count, offset=offset)
    if data.size != count:
        raise DataError(f"{path}: payload shorter than header dimensions")
    arr = data.reshape(shape, order="F")
    return np.ascontiguousarray(arr), spacing


def _write_raw(path, arr: np.ndarray, spacing, kind: str):
    header = json.dumps(
        {
            "shape": list(arr.shape),
            "dtype": arr.dtype.str.lstrip("<>|="),
            "spacing": list(spacing),
            "kind": kind,
        }
    ).encode()
    arr_le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(arr_le).tobytes())


def _read_raw(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_RAW_MAGIC))
        if magic != _RAW_MAGIC:
            raise DataError(f"{path}: bad raw-container magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        dtype = np.dtype(header["dtype"]).newbyteorder("<")
        shape = tuple(header["shape"])
        data = np.frombuffer(fh.read(), dtype=dtype, count=int(np.prod(shape)))
    return data.reshape(shape), tuple(header["spacing"]), header.get("kind", "image")


def _format(path) -> str:
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".mwv"):
        return "raw"
    raise DataError(f"unrecognized volume format: {path}")


def write_volume(vol: ImageVolume | LabelVolume, path):
    """Write a scalar or label volume; format chosen by file suffix."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    is_label = isinstance(vol, LabelVolume)
    if _format(path) == "nifti":
        descrip = b"memwarp labels" if is_label else b"memwarp image"
        _write_nifti(path, vol.data, vol.spacing, vector=False, descrip=descrip)
    else:
        _write_raw(path, vol.data, vol.spacing, "label" if is_label else "image")


def read_volume(path, num_classes: int | None = None):
    """Read a volume; integer payloads become LabelVolume (class count
    inferred from the data unless given), floats become ImageVolume."""
    if _format(path) == "nifti":
        arr, spacing = _read_nifti(path)
        if arr.ndim != 3:
            raise DataError(f"{path}: expected a scalar volume, got shape {arr.shape}")
    else:
        arr, spacing, _ = _read_raw(path)
        if arr.ndim != 3:
            raise DataError(f"{path}: expected a scalar volume, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        READ_COUNTS["label"] += 1
        n = num_classes if num_classes is not None else int(arr.max()) + 1
        return LabelVolume(data=arr, num_classes=n, spacing=spacing)
    READ_COUNTS["image"] += 1
    return ImageVolume(data=arr, spacing=spacing)


def write_field(disp_field: DisplacementField, path):
    """Write a displacement field as a 4-D volume with a trailing 3-vector."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    vec = disp_field.vectors.astype(np.float32, copy=False)
    if _format(path) == "nifti":
        _write_nifti(path, vec, disp_field.spacing, vector=True,
                     descrip=b"memwarp displacement (voxel units)")
    else:
        _write_raw(path, vec, disp_field.spacing, "field")


def read_field(path) -> DisplacementField:
    if _format(path) == "nifti":
        arr, spacing = _read_nifti(path)
    else:
        arr, spacing, _ = _read_raw(path)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataError(f"{path}: expected a (H, W, D, 3) field, got shape {arr.shape}")
    READ_COUNTS["field"] += 1
    return DisplacementField(vectors=arr, spacing=spacing)


def write_channels(arr: np.ndarray, spacing, path, descrip: bytes = b"memwarp channels"):
    """Write a (H, W, D, K) float volume (e.g. class probabilities)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise DataError(f"expected a 4-D channel volume, got shape {arr.shape}")
    if _format(path) == "nifti":
        _write_nifti(path, arr, spacing, vector=True, descrip=descrip)
    else:
        _write_raw(path, arr, spacing, "channels")
