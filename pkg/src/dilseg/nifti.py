"""Minimal single-file NIfTI-1 reader/writer.

Supports the subset of NIfTI-1 needed for ADC volumes and lesion masks:
``.nii`` / ``.nii.gz`` single-file images, scalar dtypes, sform/qform
affines, and scl_slope/scl_inter rescaling on read. Files written here
always carry an sform built from (spacing, origin, direction).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes for the dtypes we read and write.
_CODE_TO_DTYPE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_DTYPE_TO_CODE = {np.dtype(dt): code for code, dt in _CODE_TO_DTYPE.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_to_matrix(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b],
        ]
    )
    if qfac < 0:
        rot[:, 2] *= -1.0
    return rot


def read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a single-file NIfTI-1 volume.

    Returns
    -------
    (data, affine) : data is a 3D array indexed (x, y, z); affine is the
    4x4 voxel-index -> world (mm) transform.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")

    sizeof_hdr = struct.unpack("<i", raw[0:4])[0]
    if sizeof_hdr == 348:
        end = "<"
    elif struct.unpack(">i", raw[0:4])[0] == 348:
        end = ">"
    else:
        raise NiftiError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise NiftiError(f"{path}: bad NIfTI magic {raw[344:348]!r}")

    dim = struct.unpack(end + "8h", raw[40:56])
    ndim = dim[0]
    if ndim < 3:
        shape = tuple(dim[1 : 1 + ndim]) + (1,) * (3 - ndim)
    else:
        shape = tuple(dim[1:4])
        if any(d > 1 for d in dim[4 : 1 + ndim]):
            raise NiftiError(f"{path}: only 3D volumes are supported, got dim={dim}")

    datatype = struct.unpack(end + "h", raw[70:72])[0]
    if datatype not in _CODE_TO_DTYPE:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_CODE_TO_DTYPE[datatype]).newbyteorder(end)

    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = int(struct.unpack(end + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(end + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(end + "2h", raw[252:256])

    n = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=vox_offset)
    data = data.reshape(shape, order="F")
    data = np.asarray(data, dtype=data.dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter

    affine = np.eye(4)
    if sform_code > 0:
        affine[0, :] = struct.unpack(end + "4f", raw[280:296])
        affine[1, :] = struct.unpack(end + "4f", raw[296:312])
        affine[2, :] = struct.unpack(end + "4f", raw[312:328])
    elif qform_code > 0:
        b, c, d = struct.unpack(end + "3f", raw[256:268])
        ox, oy, oz = struct.unpack(end + "3f", raw[268:280])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quaternion_to_matrix(b, c, d, qfac)
        affine[:3, :3] = rot * np.asarray(pixdim[1:4])
        affine[:3, 3] = (ox, oy, oz)
    else:
        affine[:3, :3] = np.diag(pixdim[1:4])
    return data, affine


def write_nifti(path: str | Path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write a 3D array as a single-file NIfTI-1 volume (.nii or .nii.gz)."""
    path = Path(path)
    data = np.ascontiguousarray(data)
    if data.ndim != 3:
        raise NiftiError(f"expected a 3D array, got shape {data.shape}")
    dtype = np.dtype(data.dtype).newbyteorder("=")
    if dtype not in _DTYPE_TO_CODE:
        raise NiftiError(f"unsupported dtype for NIfTI output: {data.dtype}")

    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPE_TO_CODE[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: millimetres
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform aligned
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    hdr[344:348] = MAGIC

    with _open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(np.asarray(data, dtype=dtype).tobytes(order="F"))
