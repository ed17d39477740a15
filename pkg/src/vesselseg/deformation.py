"""Random per-slice elastic deformation fields and nearest-neighbour warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .volume import Volume3D


class DeformationError(ValueError):
    pass


@dataclass(frozen=True)
class DeformationParams:
    scale_range: tuple[float, float] = (1.0, 5.0)
    kernel_size: int = 15
    kernel_sigma: float = 100.0
    noise: str = "uniform"
    shared_slices: bool = False

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 <= lo <= hi:
            raise DeformationError(f"scale range {self.scale_range} must satisfy 0 <= low <= high")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise DeformationError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.kernel_sigma <= 0:
            raise DeformationError("kernel sigma must be positive")
        if self.noise not in ("uniform", "gaussian"):
            raise DeformationError(f"unknown noise distribution {self.noise!r}")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacements in voxels; ``dx[..., z]`` and ``dy[..., z]`` are slice maps.

    Sampling pulls from ``p + d(p)`` (backward warping); there is no
    displacement along z.
    """

    dx: np.ndarray
    dy: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 3:
            raise DeformationError(f"dx {self.dx.shape} and dy {self.dy.shape} must be matching 3D arrays")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise DeformationError("displacements must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, dims) -> "DeformationField":
        return cls(np.zeros(dims), np.zeros(dims))

    def source_index(self) -> np.ndarray:
        """Flat (C-order) source voxel for every target voxel."""
        nx, ny, nz = self.dims
        x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        sx = np.clip(np.floor(x + self.dx + 0.5), 0, nx - 1).astype(np.intp)
        sy = np.clip(np.floor(y + self.dy + 0.5), 0, ny - 1).astype(np.intp)
        return ((sx * ny + sy) * nz + z).ravel()


def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    k = np.arange(size) - size // 2
    taps = np.exp(-0.5 * (k / sigma) ** 2)
    return taps / taps.sum()


def smooth_field(m: np.ndarray, params: DeformationParams = DeformationParams()) -> np.ndarray:
    """Separable normalised Gaussian smoothing with clamp-to-edge borders."""
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise DeformationError("map must be finite")
    taps = gaussian_taps(params.kernel_size, params.kernel_sigma)
    out = m
    for axis in range(m.ndim):
        out = correlate1d(out, taps, axis=axis, mode="nearest")
    return out


def sample_raw_maps(shape2d, params: DeformationParams, rng: np.random.Generator):
    """One unsmoothed (dx, dy) pair: scale s ~ U(scale_range), noise in [-s, s]."""
    s = rng.uniform(*params.scale_range)
    if params.noise == "uniform":
        return rng.uniform(-s, s, shape2d), rng.uniform(-s, s, shape2d)
    return rng.normal(0.0, s, shape2d), rng.normal(0.0, s, shape2d)


def sample_field(dims, params: DeformationParams = DeformationParams(), seed: int = 0) -> DeformationField:
    params.validate()
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DeformationError(f"dims must be three positive ints, got {dims}")
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    dx = np.empty(dims)
    dy = np.empty(dims)
    for z in range(nz):
        if params.shared_slices and z > 0:
            dx[..., z], dy[..., z] = dx[..., 0], dy[..., 0]
            continue
        rx, ry = sample_raw_maps((nx, ny), params, rng)
        dx[..., z] = smooth_field(rx, params)
        dy[..., z] = smooth_field(ry, params)
    return DeformationField(dx, dy, seed)


def warp(v, t: DeformationField):
    """Nearest-neighbour gather of a volume, array (..., X, Y, Z) or Tensor."""
    if isinstance(v, Volume3D):
        if v.dims != t.dims:
            raise DeformationError(f"volume dims {v.dims} do not match field dims {t.dims}")
        return v.with_data(v.data.ravel()[t.source_index()].reshape(v.dims))
    if isinstance(v, ad.Tensor):
        if v.shape[-3:] != t.dims:
            raise DeformationError(f"tensor spatial dims {v.shape[-3:]} do not match field dims {t.dims}")
        return ad.gather(v, t.source_index())
    arr = np.asarray(v)
    if arr.shape[-3:] != t.dims:
        raise DeformationError(f"array spatial dims {arr.shape[-3:]} do not match field dims {t.dims}")
    lead = arr.shape[:-3]
    return arr.reshape(lead + (-1,))[..., t.source_index()].reshape(arr.shape)
