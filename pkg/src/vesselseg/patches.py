"""Sliding-window patch grids, seeded patch sampling and overlap blending."""

from __future__ import annotations

import itertools
import queue
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .volume import Volume3D


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    patch_size: tuple[int, int, int] = (64, 64, 64)
    stride: tuple[int, int, int] = (32, 32, 16)

    def __post_init__(self):
        if len(self.patch_size) != 3 or len(self.stride) != 3:
            raise PatchError("patch size and stride need three components")
        if any(not 0 < s <= p for s, p in zip(self.stride, self.patch_size)):
            raise PatchError(f"need 0 < stride <= patch size, got {self.stride} / {self.patch_size}")

    def check_divisible(self, divisor: int) -> None:
        if any(p % divisor for p in self.patch_size):
            raise PatchError(f"patch size {self.patch_size} must be divisible by {divisor}")


def axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    if dim < patch:
        raise PatchError(f"volume extent {dim} is smaller than patch {patch}")
    origins = list(range(0, dim - patch + 1, stride))
    if (dim - patch) % stride:
        origins.append(dim - patch)
    return origins


@dataclass(frozen=True)
class PatchGrid:
    origins: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    dims: tuple[int, int, int]
    spec: PatchSpec

    @property
    def windows(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.origins))

    def __len__(self) -> int:
        return len(self.origins[0]) * len(self.origins[1]) * len(self.origins[2])

    def slices(self, origin) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.spec.patch_size))

    def crop(self, arr: np.ndarray, origin) -> np.ndarray:
        return arr[(..., *self.slices(origin))]


def extract_grid(dims, spec: PatchSpec = PatchSpec()) -> PatchGrid:
    """Windows at multiples of the stride, plus one flush with the far edge."""
    dims = tuple(int(d) for d in dims)
    origins = tuple(tuple(axis_origins(d, p, s)) for d, p, s in zip(dims, spec.patch_size, spec.stride))
    return PatchGrid(origins, dims, spec)


def sample_epoch(volumes: Sequence[np.ndarray], labels: Sequence[np.ndarray], spec: PatchSpec,
                 count: int = 8000, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``count`` (image, label) patches drawn with replacement, uniformly
    over all (volume, window) pairs."""
    if count <= 0:
        raise PatchError("patch count must be positive")
    if not volumes:
        raise PatchError("training set is empty")
    if len(volumes) != len(labels):
        raise PatchError("volumes and labels differ in number")
    grids = [extract_grid(np.shape(v), spec) for v in volumes]
    pairs = [(i, w) for i, g in enumerate(grids) for w in g.windows]
    picks = np.random.default_rng(seed).integers(len(pairs), size=count)
    for k in picks:
        i, origin = pairs[k]
        sl = grids[i].slices(origin)
        yield volumes[i][sl], labels[i][sl]


def prefetch(items: Iterable, depth: int = 4) -> Iterator:
    """Produce ``items`` on a background thread at most ``depth`` ahead.

    A single producer keeps the consumption order identical to ``items``.
    """
    if depth <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    failure: list[BaseException] = []

    def produce():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    thread.join()
    if failure:
        raise failure[0]


def reassemble(patches: Sequence[np.ndarray], grid: PatchGrid, spacing=(1.0, 1.0, 1.0),
               kind: str = "probability") -> Volume3D:
    """Voxelwise mean over every window covering each voxel.

    The accumulator is wider than the patch dtype so that k copies of a value
    sum exactly and the mean of identical predictions is bit-identical to them.
    """
    windows = grid.windows
    if len(patches) != len(windows):
        raise PatchError(f"{len(patches)} patches for {len(windows)} windows")
    dtype = np.result_type(*[np.asarray(p).dtype for p in patches]) if patches else np.float64
    wide = np.longdouble if np.dtype(dtype).itemsize >= 8 else np.float64
    acc = np.zeros(grid.dims, dtype=wide)
    cover = np.zeros(grid.dims, dtype=np.int32)
    for origin, patch in zip(windows, patches):
        patch = np.asarray(patch)
        if patch.shape != grid.spec.patch_size:
            raise PatchError(f"patch shape {patch.shape} != {grid.spec.patch_size}")
        sl = grid.slices(origin)
        acc[sl] += patch
        cover[sl] += 1
    if (cover == 0).any():
        raise PatchError("grid leaves voxels uncovered")
    return Volume3D((acc / cover).astype(dtype), spacing, kind)
