"""Dense 3D volumes and their file formats.

Arrays are indexed ``[x, y, z]``; on disk the payload is x-fastest, which is
Fortran order of that array. Supported formats:

* single-file NIfTI-1 (``.nii``; ``.nii.gz`` read-only) with uint8, int16 or
  float32 payloads,
* raw little-endian float32 plus a JSON sidecar holding dims, spacing, kind,
* 8-bit grayscale PNG for 2D projections.
"""

from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

KINDS = ("intensity", "binary-mask", "probability")


class VolumeError(ValueError):
    pass


class MalformedHeaderError(VolumeError):
    pass


class UnsupportedDatatypeError(VolumeError):
    pass


class TruncatedPayloadError(VolumeError):
    pass


class InvalidWindowError(VolumeError):
    pass


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"volume needs three positive dims, got {arr.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.kind not in KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.kind == "binary-mask":
            if not np.isin(arr, (0, 1)).all():
                raise VolumeError("binary-mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif self.kind == "probability":
            if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 1 or np.isnan(arr).any()):
                raise VolumeError("probability values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, spacing=(1.0, 1.0, 1.0), kind="intensity") -> "Volume3D":
        values = np.asarray(values)
        if values.size != int(np.prod(dims)):
            raise VolumeError(f"{values.size} values do not fill dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), spacing, kind)

    def with_data(self, data, kind: str | None = None) -> "Volume3D":
        return Volume3D(data, self.spacing, kind or self.kind)

    def equals(self, other: "Volume3D") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.kind == other.kind
            and np.array_equal(self.data, other.data)
        )


# ---------------------------------------------------------------------------
# NIfTI-1

DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)), ("intent_name", "S16"), ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348


@dataclass(frozen=True)
class VolumeHeaderInfo:
    datatype: str = "float32"
    description: str = ""

    def __post_init__(self):
        if self.datatype not in DATATYPE_CODES:
            raise UnsupportedDatatypeError(f"datatype must be one of {sorted(DATATYPE_CODES)}")
        if len(self.description.encode()) > 80:
            raise VolumeError("description is limited to 80 bytes")


def _default_info(v: Volume3D) -> VolumeHeaderInfo:
    return VolumeHeaderInfo("uint8" if v.kind == "binary-mask" else "float32")


def _parse_header(raw: bytes, path) -> np.ndarray:
    if len(raw) < 348:
        raise MalformedHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == 348:
            break
    else:
        raise MalformedHeaderError(f"{path}: sizeof_hdr is not 348")
    if hdr["magic"] != b"n+1":
        raise MalformedHeaderError(f"{path}: magic {hdr['magic']!r} is not single-file NIfTI-1")
    return hdr


def read_nifti(path) -> Volume3D:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    hdr = _parse_header(raw, path)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code} is not uint8/int16/float32")
    dim = [int(d) for d in hdr["dim"]]
    if not (dim[0] == 3 or (dim[0] == 4 and dim[4] == 1)):
        raise MalformedHeaderError(f"{path}: expected a 3D volume, dim = {dim}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise MalformedHeaderError(f"{path}: non-positive dims {dims}")
    offset = int(hdr["vox_offset"])
    if offset < 352:
        raise MalformedHeaderError(f"{path}: vox_offset {offset} < 352")
    if offset > 352 or raw[348:352] != b"\x00\x00\x00\x00":
        log.warning("%s: header extensions present; ignored", path)
    if hdr["sform_code"] > 0:
        rot = np.array([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]])
        if np.count_nonzero(rot - np.diag(np.diag(rot))):
            log.warning("%s: oblique orientation affine ignored; only spacing is used", path)

    dtype = np.dtype(DATATYPES[code]).newbyteorder(hdr.dtype["sizeof_hdr"].byteorder)
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - offset} bytes, header promises {nbytes}")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(dtype.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        values = values.astype(np.float32) * np.float32(slope) + np.float32(inter)

    # shortest decimal repr of the stored float32, so 0.3 written reads back as 0.3
    spacing = tuple(float(str(abs(np.float32(p)))) or 1.0 for p in hdr["pixdim"][1:4])
    # kind travels in intent_name when written here; otherwise guess from the payload
    kind = hdr["intent_name"].decode(errors="replace")
    if kind not in KINDS:
        kind = "binary-mask" if values.dtype == np.uint8 and values.max(initial=0) <= 1 else "intensity"
    return Volume3D.from_flat(values, dims, spacing, kind)


def write_nifti(v: Volume3D, path, info: VolumeHeaderInfo | None = None) -> None:
    info = info or _default_info(v)
    dtype = np.dtype(DATATYPES[DATATYPE_CODES[info.datatype]])
    values = v.flat()
    if dtype.kind in "iu":
        info_lim = np.iinfo(dtype)
        if not np.array_equal(values, np.round(values)) or values.min() < info_lim.min or values.max() > info_lim.max:
            raise VolumeError(f"values are not representable as {info.datatype}")
    payload = values.astype(dtype.newbyteorder("<")).tobytes()

    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *v.dims, 1, 1, 1, 1]
    hdr["datatype"] = DATATYPE_CODES[info.datatype]
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *v.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = info.description.encode()
    hdr["sform_code"] = 1
    hdr["srow_x"] = [v.spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, v.spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, v.spacing[2], 0]
    hdr["intent_name"] = v.kind.encode()
    hdr["magic"] = b"n+1"
    path = Path(path)
    if path.suffix == ".gz":
        raise VolumeError("gzipped NIfTI is read-only; write a plain .nii")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * 4)
        fh.write(payload)


# ---------------------------------------------------------------------------
# raw + sidecar fallback

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_raw(v: Volume3D, path) -> None:
    path = Path(path)
    path.write_bytes(v.flat().astype("<f4").tobytes())
    meta = {"dims": list(v.dims), "spacing": list(v.spacing), "kind": v.kind}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_raw(path) -> Volume3D:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    dims = tuple(int(d) for d in meta["dims"])
    raw = path.read_bytes()
    count = int(np.prod(dims))
    if len(raw) < 4 * count:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes for {count} float32 voxels")
    values = np.frombuffer(raw, dtype="<f4", count=count).astype(np.float32)
    return Volume3D.from_flat(values, dims, tuple(meta["spacing"]), meta.get("kind", "intensity"))


def read_volume(path) -> Volume3D:
    """Dispatch on suffix: ``.nii``/``.nii.gz`` or raw with sidecar."""
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    return read_raw(path)


def write_volume(v: Volume3D, path, info: VolumeHeaderInfo | None = None) -> None:
    if str(path).endswith(".nii"):
        write_nifti(v, path, info)
    else:
        write_raw(v, path)


# ---------------------------------------------------------------------------
# projections

AXES = {"x": 0, "y": 1, "z": 2}


def mip(v, axis: str = "z") -> np.ndarray:
    """Maximum-intensity projection; the output keeps the remaining axes in order."""
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    return data.max(axis=AXES[axis])


def quantize(img: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise InvalidWindowError(f"window low {lo} must be below high {hi}")
    t = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(255.0 * t + 0.5).astype(np.uint8)


def write_mip_png(img: np.ndarray, path, window: tuple[float, float] | None = None) -> None:
    """Write a 2D array as 8-bit grayscale PNG, first array axis as rows.

    Without a window the image range is used (a flat image maps to black).
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise VolumeError(f"expected a 2D image, got shape {img.shape}")
    if window is None:
        lo, hi = float(img.min()), float(img.max())
        window = (lo, hi if hi > lo else lo + 1.0)
    Image.fromarray(quantize(img, window), mode="L").save(path, format="PNG")


def write_rgb_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")
