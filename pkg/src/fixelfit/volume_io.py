"""Minimal single-file NIfTI-1 reader/writer and fitted-map serialization.

Only the subset needed here is supported: magic "n+1\\0" (data in the same
file), datatypes int16 (4), float32 (16) and float64 (64), optional
scl_slope/scl_inter scaling, and both byte orders. Detached header pairs
("ni1\\0"), NIfTI-2 and compression are out of scope. Data is stored on
disk in Fortran order (x fastest), as the standard requires.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

HEADER_SIZE = 348
VOX_OFFSET = 352

# struct layout of the 348-byte NIfTI-1 header (without endianness prefix)
_HDR_FMT = (
    "i"     # sizeof_hdr
    "10s"   # data_type (unused)
    "18s"   # db_name (unused)
    "i"     # extents
    "h"     # session_error
    "c"     # regular
    "B"     # dim_info
    "8h"    # dim
    "3f"    # intent_p1..p3
    "h"     # intent_code
    "h"     # datatype
    "h"     # bitpix
    "h"     # slice_start
    "8f"    # pixdim
    "f"     # vox_offset
    "f"     # scl_slope
    "f"     # scl_inter
    "h"     # slice_end
    "B"     # slice_code
    "B"     # xyzt_units
    "f"     # cal_max
    "f"     # cal_min
    "f"     # slice_duration
    "f"     # toffset
    "i"     # glmax
    "i"     # glmin
    "80s"   # descrip
    "24s"   # aux_file
    "h"     # qform_code
    "h"     # sform_code
    "3f"    # quatern_b,c,d
    "3f"    # qoffset_x,y,z
    "4f"    # srow_x
    "4f"    # srow_y
    "4f"    # srow_z
    "16s"   # intent_name
    "4s"    # magic
)

_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}


@dataclass
class Volume:
    """In-memory volume: float32 data shaped (nx, ny, nz, nt)."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 3:
            d = d[..., None]
        if d.ndim != 4:
            raise DataError(f"volume data must be 3D or 4D, got shape {d.shape}")
        if any(s < 1 for s in d.shape):
            raise DataError(f"degenerate volume shape {d.shape}")
        self.data = d

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


def read_nifti(path: str) -> Volume:
    """Parse a single-file NIfTI-1 volume into float32.

    Endianness is auto-detected: the header is accepted in whichever byte
    order yields sizeof_hdr == 348 and dim[0] in [1, 7]. scl_slope/scl_inter
    are applied when slope is nonzero.
    """
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: file shorter than a NIfTI-1 header")

    byte_order = None
    for cand in ("<", ">"):
        sizeof_hdr = struct.unpack_from(cand + "i", raw, 0)[0]
        dim0 = struct.unpack_from(cand + "h", raw, 40)[0]
        if sizeof_hdr == HEADER_SIZE and 1 <= dim0 <= 7:
            byte_order = cand
            break
    if byte_order is None:
        raise DataError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr/dim[0])")

    fields = struct.unpack_from(byte_order + _HDR_FMT, raw, 0)
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = fields[30]
    scl_slope = fields[31]
    scl_inter = fields[32]
    sform_code = fields[45]
    srow = fields[52:64]
    magic = fields[65]

    if magic == b"ni1\x00":
        raise DataError(f"{path}: detached header/image pairs (magic 'ni1') are not supported")
    if magic != b"n+1\x00":
        raise DataError(f"{path}: bad magic {magic!r}")
    if datatype not in _DTYPES:
        raise DataError(f"{path}: unsupported datatype code {datatype}")

    ndim = dim[0]
    nx, ny, nz = (max(1, dim[i]) for i in (1, 2, 3))
    nt = max(1, dim[4]) if ndim >= 4 else 1
    n_values = nx * ny * nz * nt

    offset = int(round(vox_offset))
    if offset < HEADER_SIZE:
        raise DataError(f"{path}: vox_offset {offset} overlaps the header")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(byte_order)
    nbytes = n_values * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise DataError(f"{path}: truncated data section "
                        f"(need {offset + nbytes} bytes, have {len(raw)})")

    flat = np.frombuffer(raw, dtype=dtype, count=n_values, offset=offset)
    data = flat.reshape((nx, ny, nz, nt), order="F").astype(np.float32)
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)

    affine = None
    if sform_code > 0:
        affine = np.array(
            [srow[0:4], srow[4:8], srow[8:12], [0.0, 0.0, 0.0, 1.0]], dtype=np.float64
        )
    voxel_size = (float(pixdim[1]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[3]) or 1.0)
    return Volume(data=data, voxel_size=voxel_size, affine=affine)


def write_nifti(vol: Volume, path: str) -> None:
    """Write a single-file little-endian float32 .nii with vox_offset 352."""
    nx, ny, nz, nt = vol.dims
    ndim = 4 if nt > 1 else 3
    dim = (ndim, nx, ny, nz, nt, 1, 1, 1)
    pixdim = (1.0, vol.voxel_size[0], vol.voxel_size[1], vol.voxel_size[2], 0.0, 0.0, 0.0, 0.0)
    sform_code = 1 if vol.affine is not None else 0
    if vol.affine is not None:
        srow = tuple(float(v) for v in np.asarray(vol.affine)[:3].reshape(-1))
    else:
        srow = tuple([0.0] * 12)

    header = struct.pack(
        "<" + _HDR_FMT,
        HEADER_SIZE,
        b"", b"",
        0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0,
        0,
        16,        # float32
        32,        # bitpix
        0,
        *pixdim,
        float(VOX_OFFSET),
        1.0,       # scl_slope
        0.0,       # scl_inter
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"fixelfit", b"",
        0, sform_code,
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        *srow[0:4], *srow[4:8], *srow[8:12],
        b"",
        b"n+1\x00",
    )
    assert len(header) == HEADER_SIZE
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(payload)


def write_param_maps(fit, out_dir: str, voxel_size=(1.0, 1.0, 1.0), affine=None) -> dict[str, str]:
    """Serialize fitted constrained fields to out_dir.

    Writes fractions.nii (K+3 channels, order [csf, gm, wm_1..K, restricted]),
    s0.nii, f_intra.nii, fiber_<k>_direction.nii (3 channels each),
    bias_field.nii, and calibration.json. Returns {name: path}.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths: dict[str, str] = {}

    def _save(name: str, arr: np.ndarray) -> None:
        p = os.path.join(out_dir, name + ".nii")
        write_nifti(Volume(data=arr, voxel_size=voxel_size, affine=affine), p)
        paths[name] = p

    _save("fractions", fit.fractions)
    _save("s0", fit.s0)
    _save("f_intra", fit.f_intra)
    for k in range(fit.directions.shape[3]):
        _save(f"fiber_{k + 1}_direction", fit.directions[:, :, :, k, :])
    _save("bias_field", fit.bias_field)

    cal_path = os.path.join(out_dir, "calibration.json")
    with open(cal_path, "w") as f:
        json.dump(
            {
                "alpha": [float(v) for v in fit.alpha],
                "beta": [float(v) for v in fit.beta],
                "sigma_log": float(fit.sigma_log),
                "sigma": float(np.exp(fit.sigma_log)),
                "bias_grid": np.asarray(fit.bias_grid).tolist(),
            },
            f,
            indent=1,
        )
    paths["calibration"] = cal_path
    return paths


@dataclass
class ParamMaps:
    """Fitted fields read back from disk (see write_param_maps)."""

    s0: np.ndarray
    fractions: np.ndarray
    directions: np.ndarray
    f_intra: np.ndarray
    bias_field: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sigma_log: float
    bias_grid: np.ndarray = field(repr=False, default=None)

    @property
    def n_fibers(self) -> int:
        return self.directions.shape[3]

    @property
    def wm_fractions(self) -> np.ndarray:
        k = self.n_fibers
        return self.fractions[..., 2:2 + k]


def read_param_maps(fit_dir: str) -> ParamMaps:
    def _load(name: str) -> np.ndarray:
        return read_nifti(os.path.join(fit_dir, name + ".nii")).data

    fractions = _load("fractions")
    s0 = _load("s0")[..., 0]
    f_intra = _load("f_intra")[..., 0]
    n_fibers = fractions.shape[3] - 3
    dirs = np.stack(
        [_load(f"fiber_{k + 1}_direction") for k in range(n_fibers)], axis=3
    )
    bias = _load("bias_field")[..., 0]
    with open(os.path.join(fit_dir, "calibration.json")) as f:
        cal = json.load(f)
    return ParamMaps(
        s0=s0,
        fractions=fractions,
        directions=dirs,
        f_intra=f_intra,
        bias_field=bias,
        alpha=np.asarray(cal["alpha"], dtype=np.float64),
        beta=np.asarray(cal["beta"], dtype=np.float64),
        sigma_log=float(cal["sigma_log"]),
        bias_grid=np.asarray(cal["bias_grid"], dtype=np.float64),
    )
