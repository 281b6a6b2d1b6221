"""NIfTI-1 reading/writing and nearest-axis reorientation to RAS.

Voxel arrays are indexed ``data[i, j, k]`` with ``i`` the fastest-varying axis
on disk (the NIfTI convention). The affine maps ``(i, j, k, 1)`` to world mm.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DegenerateAffine, DimensionError, GridMismatch, MalformedHeader,
                     UnsupportedDatatype)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> (numpy kind, bitpix)
DATATYPES = {
    2: ("uint8", 8),
    4: ("int16", 16),
    8: ("int32", 32),
    16: ("float32", 32),
    64: ("float64", 64),
}
DTYPE_CODES = {name: code for code, (name, _) in DATATYPES.items()}


@dataclass
class Volume:
    """A 3D scalar image on a voxel grid.

    ``data`` is stored as float32 (the working type); ``origin_dtype`` records
    the on-disk datatype so integer images can be written back losslessly.
    """

    data: np.ndarray
    affine: np.ndarray
    origin_dtype: str = "float32"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.affine = np.array(self.affine, dtype=np.float64)
        _check_grid(self.data, self.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def with_data(self, data, origin_dtype=None) -> "Volume":
        return Volume(data, self.affine.copy(), origin_dtype or self.origin_dtype)


@dataclass
class BrainMask:
    """Binary mask (uint8 values 0/1) sharing a Volume's grid."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        self.data = data
        self.affine = np.array(self.affine, dtype=np.float64)
        _check_grid(self.data, self.affine)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @property
    def spacing(self):
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @classmethod
    def from_volume(cls, vol: Volume) -> "BrainMask":
        return cls((vol.data > 0.5).astype(np.uint8), vol.affine.copy())

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.affine.copy(), "uint8")


def _check_grid(data, affine):
    if data.ndim != 3 or min(data.shape) < 1:
        raise DimensionError(f"expected a non-empty 3D array, got shape {data.shape}")
    if affine.shape != (4, 4):
        raise DegenerateAffine(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) <= 1e-9:
        raise DegenerateAffine("affine is not invertible")


def same_grid(a, b, atol=1e-6) -> bool:
    return a.dims == b.dims and np.allclose(a.affine, b.affine, rtol=0.0, atol=atol)


def check_same_grid(a, b):
    if not same_grid(a, b):
        raise GridMismatch(f"grids differ: {a.dims} vs {b.dims}")


# --------------------------------------------------------------------------- reading

def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = R * zooms
    aff[:3, 3] = (qx, qy, qz)
    return aff


def read_nifti(path) -> Volume:
    """Read a ``.nii`` / ``.nii.gz`` file (or an ``.hdr``/``.img`` pair) into a Volume."""
    path = Path(path)
    buf = _open_bytes(path)
    if len(buf) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack("<i", buf[:4])[0] == HEADER_SIZE:
        en = "<"
    elif struct.unpack(">i", buf[:4])[0] == HEADER_SIZE:
        en = ">"
    else:
        raise MalformedHeader(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    magic = buf[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeader(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(en + "8h", buf[40:56])
    datatype = struct.unpack(en + "h", buf[70:72])[0]
    pixdim = struct.unpack(en + "8f", buf[76:108])
    vox_offset = struct.unpack(en + "f", buf[108:112])[0]
    slope, inter = struct.unpack(en + "2f", buf[112:120])
    qform_code, sform_code = struct.unpack(en + "2h", buf[252:256])
    qb, qc, qd, qx, qy, qz = struct.unpack(en + "6f", buf[256:280])
    srow = np.array(struct.unpack(en + "12f", buf[280:328]), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise DimensionError(f"{path}: invalid dim[0]={ndim}")
    shape = list(dim[1:ndim + 1])
    if ndim < 3 or any(s < 1 for s in shape):
        raise DimensionError(f"{path}: need a 3D volume, got dims {shape}")
    if any(s != 1 for s in shape[3:]):
        raise DimensionError(f"{path}: only single-frame 3D volumes are supported, got {shape}")
    shape = shape[:3]

    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    kind, _ = DATATYPES[datatype]
    dtype = np.dtype(kind).newbyteorder(en)
    count = int(np.prod(shape))

    if magic == b"ni1\x00":
        img = path.with_suffix(".img")
        if not img.exists():
            img = Path(str(img) + ".gz")
        payload = _open_bytes(img)
        offset = int(vox_offset)
    else:
        payload = buf
        offset = int(vox_offset)
    if len(payload) < offset + count * dtype.itemsize:
        raise MalformedHeader(f"{path}: data section truncated")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(shape, order="F")

    if slope != 0.0 and np.isfinite(slope) and (slope != 1.0 or inter != 0.0):
        data = arr.astype(np.float64) * slope + inter
    else:
        data = arr

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3] = srow
    elif qform_code > 0:
        affine = _quaternion_affine(qb, qc, qd, qx, qy, qz, pixdim)
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    return Volume(np.asarray(data, dtype=np.float32), affine, kind)


# --------------------------------------------------------------------------- writing

def _choose_dtype(data, requested):
    if requested is None:
        return "float32"
    if requested not in DTYPE_CODES:
        raise UnsupportedDatatype(f"cannot write datatype {requested!r}")
    if requested.startswith("float"):
        return requested
    info = np.iinfo(requested)
    cast = data.astype(requested)
    exact = (data.min() >= info.min and data.max() <= info.max
             and np.array_equal(cast.astype(np.float32), data))
    return requested if exact else "float32"


def nifti_bytes(data, affine, dtype="float32") -> bytes:
    """Serialize an array + affine to an uncompressed single-file NIfTI-1 image."""
    data = np.asarray(data)
    affine = np.asarray(affine, dtype=np.float64)
    code = DTYPE_CODES[dtype]
    bitpix = DATATYPES[code][1]
    spacing = np.linalg.norm(affine[:3, :3], axis=0)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform_code, sform_code (aligned)
    struct.pack_into("<12f", hdr, 280, *affine[:3].ravel())
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=np.dtype(dtype).newbyteorder("<")).ravel(order="F")
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body.tobytes()


def write_nifti(vol, path, compress=None, dtype=None) -> None:
    """Write a Volume or BrainMask.

    ``compress`` defaults to the ``.gz`` suffix of ``path``. Masks are stored
    as uint8; volumes keep their origin datatype when it represents the data
    exactly, otherwise float32.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if isinstance(vol, BrainMask):
        data, out_dtype = vol.data, dtype or "uint8"
    else:
        data = vol.data
        out_dtype = _choose_dtype(data, dtype or vol.origin_dtype)
    raw = nifti_bytes(data, vol.affine, out_dtype)
    if compress:
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.write_bytes(raw)


# --------------------------------------------------------------------------- orientation

@dataclass(frozen=True)
class OrientRecord:
    """How a volume was permuted/flipped to reach RAS.

    New axis ``w`` is old axis ``perm[w]``, reversed when ``flips[w]``.
    """

    perm: tuple
    flips: tuple
    original_affine: np.ndarray = field(compare=False)
    original_dims: tuple = ()

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)


def _orient_plan(affine):
    A = affine[:3, :3]
    dominant = np.argmax(np.abs(A), axis=0)  # world axis of each voxel axis
    if len(set(dominant.tolist())) != 3:
        raise DegenerateAffine(f"voxel axes share a dominant world axis: {dominant.tolist()}")
    perm = tuple(int(np.where(dominant == w)[0][0]) for w in range(3))
    flips = tuple(bool(A[w, perm[w]] < 0) for w in range(3))
    return perm, flips


def _apply_plan(arr, perm, flips):
    out = np.transpose(arr, perm)
    for ax, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=ax)
    return np.ascontiguousarray(out)


def reorient_ras(vol):
    """Permute/flip voxel axes so axis 0/1/2 points mostly along +x/+y/+z.

    Works on Volume or BrainMask; returns ``(reoriented, OrientRecord)``.
    No resampling is performed.
    """
    perm, flips = _orient_plan(vol.affine)
    record = OrientRecord(perm, flips, vol.affine.copy(), vol.dims)
    if record.is_identity:
        return vol, record
    dims = vol.dims
    T = np.zeros((4, 4))
    T[3, 3] = 1.0
    for w in range(3):
        j = perm[w]
        if flips[w]:
            T[j, w] = -1.0
            T[j, 3] = dims[j] - 1
        else:
            T[j, w] = 1.0
    data = _apply_plan(vol.data, perm, flips)
    affine = vol.affine @ T
    return _rebuild(vol, data, affine), record


def apply_inverse(record: OrientRecord, vol):
    """Undo :func:`reorient_ras`, restoring the original array layout and affine."""
    if record.is_identity:
        return vol
    data = vol.data
    for ax, f in enumerate(record.flips):
        if f:
            data = np.flip(data, axis=ax)
    data = np.ascontiguousarray(np.transpose(data, np.argsort(record.perm)))
    return _rebuild(vol, data, record.original_affine.copy())


def _rebuild(vol, data, affine):
    if isinstance(vol, BrainMask):
        return BrainMask(data, affine)
    return Volume(data, affine, vol.origin_dtype)
