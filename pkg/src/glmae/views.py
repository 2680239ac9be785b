"""Global/local crop sampling, whole-volume downsampling, and overlap statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, ShapeMismatchError
from .volume_store import Volume

Triple = tuple[int, int, int]


def _triple(x) -> Triple:
    if isinstance(x, (int, np.integer)):
        return (int(x),) * 3
    t = tuple(int(v) for v in x)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {x}")
    return t


@dataclass(frozen=True)
class CropGeometry:
    origin: Triple
    extent: Triple
    source_shape: Triple

    def __post_init__(self):
        for o, e, s in zip(self.origin, self.extent, self.source_shape):
            if o < 0 or e < 1 or o + e > s:
                raise ValueError(f"crop {self.origin}+{self.extent} does not fit in {self.source_shape}")

    @property
    def volume(self) -> int:
        return math.prod(self.extent)

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))


@dataclass(frozen=True)
class View:
    data: np.ndarray
    geometry: CropGeometry
    kind: str
    target_size: Triple


@dataclass
class ViewSet:
    globals: list[View]
    locals: list[View]
    source_id: str | None = None


@dataclass(frozen=True)
class ViewConfig:
    """Crop-and-resize parameters for global and local views."""

    global_scale: tuple[float, float] = (0.5, 1.0)
    global_size: Triple = (160, 160, 160)
    local_scale: tuple[float, float] = (0.25, 0.5)
    local_size: Triple = (96, 96, 96)

    def __post_init__(self):
        object.__setattr__(self, "global_size", _triple(self.global_size))
        object.__setattr__(self, "local_size", _triple(self.local_size))
        for name in ("global_scale", "local_scale"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))

    @classmethod
    def desk(cls) -> "ViewConfig":
        return cls(global_size=(32, 32, 32), local_size=(16, 16, 16))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_extent(source_shape, s: float) -> Triple:
    return tuple(min(max(round_half_up(s * n), 1), n) for n in source_shape)


def sample_crop(source_shape, scale_range, rng: np.random.Generator) -> CropGeometry:
    """Draw one scale factor for all axes, then a uniform valid origin per axis."""
    source_shape = _triple(source_shape)
    if min(source_shape) < 2:
        raise DegenerateInputError(f"volume {source_shape} is smaller than 2 voxels along some axis")
    s = rng.uniform(*scale_range)
    extent = crop_extent(source_shape, s)
    slack = np.array(source_shape) - np.array(extent)
    origin = tuple(int(o) for o in rng.integers(0, slack + 1))
    return CropGeometry(origin, extent, source_shape)


def resize(data: np.ndarray, size, mode: str = "trilinear") -> np.ndarray:
    """Resize a 3D grid. Trilinear uses half-voxel centres (align_corners=False)."""
    size = _triple(size)
    if tuple(data.shape) == size:
        return np.array(data, copy=True)
    t = torch.from_numpy(np.array(data, dtype=np.float32))[None, None]
    if mode == "nearest":
        out = F.interpolate(t, size=size, mode="nearest-exact")
    else:
        out = F.interpolate(t, size=size, mode="trilinear", align_corners=False)
    return out[0, 0].numpy()


def crop_and_resize(v: Volume, geom: CropGeometry, size, kind: str) -> View:
    data = resize(v.data[geom.slices()], size)
    return View(data, geom, kind, _triple(size))


def sample_global(v: Volume, cfg: ViewConfig, rng: np.random.Generator) -> View:
    geom = sample_crop(v.shape, cfg.global_scale, rng)
    return crop_and_resize(v, geom, cfg.global_size, "global")


def sample_local(v: Volume, cfg: ViewConfig, rng: np.random.Generator) -> View:
    geom = sample_crop(v.shape, cfg.local_scale, rng)
    return crop_and_resize(v, geom, cfg.local_size, "local")


def sample_views(v: Volume, p: int, q: int, cfg: ViewConfig, rng: np.random.Generator, source_id=None) -> ViewSet:
    """``p`` global views followed by ``q`` local views; rng is consumed in that order."""
    if p < 1 or q < 0:
        raise ValueError(f"need p >= 1 and q >= 0, got p={p}, q={q}")
    globals_ = [sample_global(v, cfg, rng) for _ in range(p)]
    locals_ = [sample_local(v, cfg, rng) for _ in range(q)]
    return ViewSet(globals_, locals_, source_id)


def downsample_whole(v: Volume, size) -> View:
    """Resize the entire volume; used by the whole-volume-downsampling ablation."""
    size = _triple(size)
    if min(size) < 1:
        raise ValueError(f"size must be positive, got {size}")
    geom = CropGeometry((0, 0, 0), v.shape, v.shape)
    return View(resize(v.data, size), geom, "global", size)


# ---------------------------------------------------------------- overlap statistics


def intersection_voxels(a: CropGeometry, b: CropGeometry) -> int:
    n = 1
    for oa, ea, ob, eb in zip(a.origin, a.extent, b.origin, b.extent):
        n *= max(0, min(oa + ea, ob + eb) - max(oa, ob))
    return n


def overlap_ratio(local: CropGeometry, global_: CropGeometry) -> float:
    """Percent of the local box covered by the global box (normalised by the local box only)."""
    if local.source_shape != global_.source_shape:
        raise ShapeMismatchError("crops come from volumes of different shape")
    return 100.0 * intersection_voxels(local, global_) / local.volume


@dataclass
class OverlapStats:
    overlap_pct: float
    hit_pct: float
    n_samples: int
    ratios: list[float] = field(default_factory=list, repr=False)


def overlap_stats(shapes, p: int, q: int, cfg: ViewConfig, seed: int, rounds: int = 1) -> OverlapStats:
    """Overlap and Hit over ``rounds`` passes of the dataset described by ``shapes``.

    Every (pass, volume) draws p global then q local crops from
    ``default_rng([seed, pass, index])``, matching the order of ``sample_views``.
    """
    if not shapes:
        raise ValueError("empty dataset")
    if p < 1 or q < 1:
        raise ValueError("overlap statistics need p >= 1 and q >= 1")
    overlap_sum = 0.0
    hit_sum = 0.0
    ratios = []
    n = 0
    for r in range(rounds):
        for i, shape in enumerate(shapes):
            rng = np.random.default_rng([seed, r, i])
            gs = [sample_crop(shape, cfg.global_scale, rng) for _ in range(p)]
            ls = [sample_crop(shape, cfg.local_scale, rng) for _ in range(q)]
            per = [overlap_ratio(l, g) for g in gs for l in ls]
            ratios.extend(per)
            overlap_sum += sum(per) / (p * q)
            hit_sum += sum(100.0 * (x > 0) for x in per) / (p * q)
            n += 1
    return OverlapStats(overlap_sum / n, hit_sum / n, n, ratios)


def dataset_overlap(manifest, p: int, q: int, cfg: ViewConfig, seed: int, rounds: int = 1) -> float:
    return overlap_stats(manifest.shapes(), p, q, cfg, seed, rounds).overlap_pct


def dataset_hit(manifest, p: int, q: int, cfg: ViewConfig, seed: int, rounds: int = 1) -> float:
    return overlap_stats(manifest.shapes(), p, q, cfg, seed, rounds).hit_pct
