"""Synthetic vessel phantoms with exact labels, and 6:2:3 dataset splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter
from scipy.spatial import cKDTree

from .seeding import stream, stream_seed
from .volume import Volume3D, read_nifti, write_nifti


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 96, 96)
    vessel_count: tuple[int, int] = (8, 14)
    radius_range: tuple[float, float] = (0.75, 3.0)
    thin_fraction: float = 0.6       # share of vessels with radius in [0.75, 1.25]
    waypoints: int = 4
    vessel_intensity: float = 1.0
    background: float = 0.1
    noise_sigma: float = 0.05
    blur_sigma: float = 0.6          # 0 disables the point-spread blur
    gap_probability: float = 0.0
    gap_length: float = 6.0          # centerline length per gap segment, voxels
    morph: str = "none"              # none | erode | dilate, applied to the corrupted label
    spacing: tuple[float, float, float] = (0.3, 0.3, 0.3)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"dims must be positive, got {self.dims}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise PhantomError(f"radius range {self.radius_range} must be positive and ordered")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise PhantomError("noise and blur sigmas must be non-negative")
        if not 0 <= self.gap_probability <= 1:
            raise PhantomError("gap probability must lie in [0, 1]")
        if self.vessel_count[0] < 0 or self.vessel_count[0] > self.vessel_count[1]:
            raise PhantomError(f"bad vessel count range {self.vessel_count}")
        if self.morph not in ("none", "erode", "dilate"):
            raise PhantomError(f"unknown morph {self.morph!r}")


@dataclass
class Tube:
    points: np.ndarray   # (n, 3) centerline samples, ~0.25 voxel apart
    radius: float


@dataclass
class Phantom:
    image: Volume3D
    label: Volume3D
    corrupted: Volume3D
    tubes: list[Tube] = field(default_factory=list)


def resample_curve(points: np.ndarray, step: float = 0.25) -> np.ndarray:
    """Points along a polyline at (approximately) uniform arc-length ``step``."""
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(np.ceil(arc[-1] / step)) + 1, 2)
    s = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(s, arc, points[:, k]) for k in range(3)], axis=1)


def random_curve(rng: np.random.Generator, dims, n_waypoints: int) -> np.ndarray:
    """Cubic spline through random waypoints, entering and leaving near the faces."""
    dims = np.asarray(dims, dtype=np.float64)
    axis = rng.integers(3)
    start = rng.uniform(0.15, 0.85, 3) * dims
    end = rng.uniform(0.15, 0.85, 3) * dims
    start[axis], end[axis] = 0.0, dims[axis] - 1
    inner = rng.uniform(0.1, 0.9, (max(n_waypoints - 2, 0), 3)) * dims
    frac = np.sort(rng.uniform(0.2, 0.8, len(inner)))
    inner[:, axis] = frac * (dims[axis] - 1)
    way = np.vstack([start, inner, end])
    t = np.linspace(0.0, 1.0, len(way))
    spline = CubicSpline(t, way, axis=0)
    dense = spline(np.linspace(0.0, 1.0, 40 * len(way)))
    return resample_curve(dense)


def rasterize_tubes(dims, tubes: Sequence[Tube], gaps: Sequence[np.ndarray] | None = None):
    """Label voxels within ``radius`` of any tube centerline sample.

    ``gaps`` gives, per tube, a boolean per centerline sample; voxels whose
    nearest sample on that tube is gapped do not count for the second mask.
    Returns (clean, kept) boolean arrays.
    """
    clean = np.zeros(dims, dtype=bool)
    kept = np.zeros(dims, dtype=bool)
    for n, tube in enumerate(tubes):
        pts = tube.points
        lo = np.maximum(np.floor(pts.min(axis=0) - tube.radius), 0).astype(int)
        hi = np.minimum(np.ceil(pts.max(axis=0) + tube.radius), np.asarray(dims) - 1).astype(int)
        if np.any(hi < lo):
            continue
        grid = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
        coords = grid.reshape(-1, 3)
        dist, idx = cKDTree(pts).query(coords, distance_upper_bound=tube.radius + 1e-9)
        inside = dist <= tube.radius
        hit = coords[inside]
        clean[hit[:, 0], hit[:, 1], hit[:, 2]] = True
        keep = inside.copy()
        if gaps is not None:
            keep[inside] = ~gaps[n][idx[inside]]
        hk = coords[keep]
        kept[hk[:, 0], hk[:, 1], hk[:, 2]] = True
    return clean, kept


def _sample_radius(rng: np.random.Generator, cfg: PhantomConfig) -> float:
    lo, hi = cfg.radius_range
    split = min(max(1.25, lo), hi)
    if rng.random() < cfg.thin_fraction:
        return float(rng.uniform(lo, split))
    return float(rng.uniform(split, hi))


def _gap_mask(rng: np.random.Generator, n_points: int, cfg: PhantomConfig) -> np.ndarray:
    per_seg = max(int(round(cfg.gap_length / 0.25)), 1)
    n_seg = -(-n_points // per_seg)
    seg_gap = rng.random(n_seg) < cfg.gap_probability
    return np.repeat(seg_gap, per_seg)[:n_points]


def generate(cfg: PhantomConfig = PhantomConfig(), seed: int = 0) -> Phantom:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_vessels = int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))
    tubes = [Tube(random_curve(rng, cfg.dims, cfg.waypoints), _sample_radius(rng, cfg)) for _ in range(n_vessels)]
    gaps = [_gap_mask(rng, len(t.points), cfg) for t in tubes]
    clean, kept = rasterize_tubes(cfg.dims, tubes, gaps)
    if cfg.morph == "erode":
        kept = binary_erosion(kept) & kept
    elif cfg.morph == "dilate":
        kept = binary_dilation(kept)

    label = clean.astype(np.float64)
    image = (cfg.vessel_intensity - cfg.background) * label + cfg.background
    if cfg.blur_sigma > 0:
        image = gaussian_filter(image, cfg.blur_sigma, mode="nearest")
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, cfg.dims)
    return Phantom(
        Volume3D(image.astype(np.float32), cfg.spacing, "intensity"),
        Volume3D(clean.astype(np.uint8), cfg.spacing, "binary-mask"),
        Volume3D(kept.astype(np.uint8), cfg.spacing, "binary-mask"),
        tubes,
    )


# ---------------------------------------------------------------------------
# datasets

SPLIT_RATIO = {"train": 6, "val": 2, "test": 3}


def split_sizes(n: int, ratio=SPLIT_RATIO) -> dict[str, int]:
    """Largest-remainder rounding of ``ratio`` to ``n`` items, every split non-empty."""
    if n < len(ratio):
        raise PhantomError(f"need at least {len(ratio)} volumes for a {len(ratio)}-way split, got {n}")
    total = sum(ratio.values())
    exact = {k: n * r / total for k, r in ratio.items()}
    sizes = {k: int(np.floor(v)) for k, v in exact.items()}
    for k in sorted(exact, key=lambda k: (-(exact[k] - sizes[k]), list(ratio).index(k)))[: n - sum(sizes.values())]:
        sizes[k] += 1
    for k in ratio:
        if sizes[k] == 0:
            donor = max(sizes, key=sizes.get)
            sizes[donor] -= 1
            sizes[k] = 1
    return sizes


@dataclass
class Dataset:
    cases: dict[str, Phantom]
    split: dict[str, list[str]]
    seed: int
    config: PhantomConfig

    def subset(self, name: str) -> list[Phantom]:
        return [self.cases[i] for i in self.split[name]]


def make_dataset(n: int = 11, cfg: PhantomConfig = PhantomConfig(), seed: int = 0) -> Dataset:
    sizes = split_sizes(n)
    ids = [f"phantom_{i:03d}" for i in range(n)]
    cases = {i: generate(cfg, stream_seed(seed, "phantom", k + 1)) for k, i in enumerate(ids)}
    order = stream(seed, "phantom", 0).permutation(n)
    split, start = {}, 0
    for name in SPLIT_RATIO:
        split[name] = sorted(ids[k] for k in order[start:start + sizes[name]])
        start += sizes[name]
    return Dataset(cases, split, seed, cfg)


# on-disk layout: <root>/<split>_images/<id>.nii, <split>_labels/<id>.nii,
# <split>_labels_corrupt/<id>.nii, and manifest.json

def save_dataset(ds: Dataset, root) -> dict:
    root = Path(root)
    files = {}
    for name, ids in ds.split.items():
        for sub in ("images", "labels", "labels_corrupt"):
            (root / f"{name}_{sub}").mkdir(parents=True, exist_ok=True)
        for i in ids:
            case = ds.cases[i]
            paths = {
                "image": root / f"{name}_images" / f"{i}.nii",
                "label": root / f"{name}_labels" / f"{i}.nii",
                "label_corrupt": root / f"{name}_labels_corrupt" / f"{i}.nii",
            }
            write_nifti(case.image, paths["image"])
            write_nifti(case.label, paths["label"])
            write_nifti(case.corrupted, paths["label_corrupt"])
            files[i] = {k: str(p.relative_to(root)) for k, p in paths.items()}
    manifest = {
        "seed": ds.seed,
        "config": asdict(ds.config),
        "split": ds.split,
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class LoadedCase:
    id: str
    image: Volume3D
    label: Volume3D
    corrupted: Volume3D


def load_dataset(root) -> dict[str, list[LoadedCase]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = {}
    for name, ids in manifest["split"].items():
        out[name] = [
            LoadedCase(
                i,
                read_nifti(root / manifest["files"][i]["image"]),
                read_nifti(root / manifest["files"][i]["label"]),
                read_nifti(root / manifest["files"][i]["label_corrupt"]),
            )
            for i in ids
        ]
    return out
