"""Multiscale Hessian vesselness (Frangi) for bright tubular structures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume3D


class FrangiError(ValueError):
    pass


@dataclass(frozen=True)
class VesselnessParams:
    scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    alpha: float = 0.5
    beta: float = 0.5
    c: float | None = None   # None: half the max Hessian Frobenius norm, per scale
    threshold: float = 0.5   # fraction of the maximum response

    def validate(self) -> None:
        if not self.scales:
            raise FrangiError("scale list is empty")
        if min(self.scales) <= 0 or self.alpha <= 0 or self.beta <= 0:
            raise FrangiError("scales, alpha and beta must be positive")
        if self.c is not None and self.c <= 0:
            raise FrangiError("c must be positive")


def _second_differences(s: np.ndarray):
    p = np.pad(s, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]

    def sh(dx, dy, dz):
        return p[1 + dx: p.shape[0] - 1 + dx, 1 + dy: p.shape[1] - 1 + dy, 1 + dz: p.shape[2] - 1 + dz]

    hxx = sh(1, 0, 0) - 2 * c + sh(-1, 0, 0)
    hyy = sh(0, 1, 0) - 2 * c + sh(0, -1, 0)
    hzz = sh(0, 0, 1) - 2 * c + sh(0, 0, -1)
    hxy = (sh(1, 1, 0) - sh(1, -1, 0) - sh(-1, 1, 0) + sh(-1, -1, 0)) / 4
    hxz = (sh(1, 0, 1) - sh(1, 0, -1) - sh(-1, 0, 1) + sh(-1, 0, -1)) / 4
    hyz = (sh(0, 1, 1) - sh(0, 1, -1) - sh(0, -1, 1) + sh(0, -1, -1)) / 4
    return hxx, hyy, hzz, hxy, hxz, hyz


def hessian_at_scale(v, sigma: float):
    """(Hxx, Hyy, Hzz, Hxy, Hxz, Hyz) of the sigma-smoothed volume, times sigma**2."""
    if sigma <= 0:
        raise FrangiError("sigma must be positive")
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    smoothed = gaussian_filter(data.astype(np.float64), sigma, mode="nearest", truncate=4.0)
    return tuple(h * sigma ** 2 for h in _second_differences(smoothed))


def symmetric_eigenvalues(hxx, hyy, hzz, hxy, hxz, hyz) -> np.ndarray:
    """Closed-form (trigonometric) eigenvalues of symmetric 3x3 matrices.

    Returns shape (..., 3) ordered by increasing absolute value; equal
    magnitudes keep the solver's order (stable sort).
    """
    q = (hxx + hyy + hzz) / 3.0
    p1 = hxy ** 2 + hxz ** 2 + hyz ** 2
    a, b, c = hxx - q, hyy - q, hzz - q
    p2 = a ** 2 + b ** 2 + c ** 2 + 2 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    det = (a * (b * c - hyz ** 2) - hxy * (hxy * c - hyz * hxz) + hxz * (hxy * hyz - b * hxz)) / safe ** 3
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2 * p * np.cos(phi)
    e3 = q + 2 * p * np.cos(phi + 2 * np.pi / 3)
    e2 = 3 * q - e1 - e3
    eig = np.stack([e1, e2, e3], axis=-1)
    eig = np.where((p > 0)[..., None], eig, q[..., None])
    order = np.argsort(np.abs(eig), axis=-1, kind="stable")
    return np.take_along_axis(eig, order, axis=-1)


def vesselness(eig: np.ndarray, params: VesselnessParams = VesselnessParams(), c: float | None = None) -> np.ndarray:
    """Per-voxel vesselness from |l1| <= |l2| <= |l3| ordered eigenvalues."""
    eig = np.asarray(eig, dtype=np.float64)
    l1, l2, l3 = eig[..., 0], eig[..., 1], eig[..., 2]
    c = c if c is not None else params.c
    s2 = l1 ** 2 + l2 ** 2 + l3 ** 2
    if c is None:
        c = 0.5 * float(np.sqrt(s2.max())) if s2.size else 1.0
    if c <= 0:
        c = 1.0
    a2, a3 = np.abs(l2), np.abs(l3)
    degenerate = (a3 == 0) | (a2 == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(degenerate, 0.0, a2 / np.where(a3 == 0, 1.0, a3))
        rb = np.where(degenerate, 0.0, np.abs(l1) / np.sqrt(np.where(degenerate, 1.0, a2 * a3)))
    v = (
        (1.0 - np.exp(-ra ** 2 / (2 * params.alpha ** 2)))
        * np.exp(-rb ** 2 / (2 * params.beta ** 2))
        * (1.0 - np.exp(-s2 / (2 * c ** 2)))
    )
    v = np.where((l2 > 0) | (l3 > 0) | (a3 == 0), 0.0, v)
    return np.clip(v, 0.0, 1.0)


def vesselness_at_scale(v, sigma: float, params: VesselnessParams = VesselnessParams()) -> np.ndarray:
    return vesselness(symmetric_eigenvalues(*hessian_at_scale(v, sigma)), params)


def frangi_multiscale(v, params: VesselnessParams = VesselnessParams(),
                      scales: Sequence[float] | None = None):
    """Voxelwise max of vesselness over scales, and the thresholded mask.

    The mask keeps voxels at or above ``threshold`` times the max response.
    """
    params.validate()
    scales = tuple(scales) if scales is not None else params.scales
    if not scales:
        raise FrangiError("scale list is empty")
    spacing = v.spacing if isinstance(v, Volume3D) else (1.0, 1.0, 1.0)
    best = None
    for sigma in scales:
        resp = vesselness_at_scale(v, sigma, params)
        best = resp if best is None else np.maximum(best, resp)
    peak = float(best.max())
    mask = best >= params.threshold * peak if peak > 0 else np.zeros(best.shape, dtype=bool)
    return Volume3D(best, spacing, "probability"), Volume3D(mask.astype(np.uint8), spacing, "binary-mask")
