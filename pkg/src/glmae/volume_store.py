"""Volumes on disk and in memory, intensity windowing, and synthetic datasets.

Raw-grid file pair ``<id>.f32raw`` + ``<id>.json``: the payload is little-endian
float32 in C order over (H, W, D); the sidecar carries shape, spacing,
intensity_range and a format version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidWindowError, NonFiniteError, ShapeMismatchError

FORMAT_VERSION = 1
RAW_SUFFIX = ".f32raw"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatchError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_range", tuple(float(x) for x in self.intensity_range))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabeledVolume:
    volume: Volume
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.volume.shape:
            raise ShapeMismatchError(f"labels shape {labels.shape} != volume shape {self.volume.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))


def normalize_window(v: Volume, lo: float, hi: float) -> Volume:
    """Map intensities in ``[lo, hi]`` linearly onto ``[0, 1]``, clamping outside."""
    if not lo < hi:
        raise InvalidWindowError(f"window lower bound {lo} must be below upper bound {hi}")
    x = (v.data.astype(np.float64) - lo) / (hi - lo)
    return Volume(np.clip(x, 0.0, 1.0).astype(np.float32), v.spacing, (lo, hi))


# ---------------------------------------------------------------- raw-grid io


def _pair(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (RAW_SUFFIX, ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + RAW_SUFFIX), p.with_name(p.name + ".json")


def save_volume(v: Volume, path, extra: dict | None = None) -> Path:
    """Write ``v`` as a raw-grid pair. ``path`` may omit the suffix."""
    raw, meta = _pair(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(v.data.astype("<f4", copy=False).tobytes(order="C"))
    sidecar = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "intensity_range": list(v.intensity_range),
        "version": FORMAT_VERSION,
    }
    if extra:
        sidecar.update(extra)
    meta.write_text(json.dumps(sidecar))
    return raw


def _read_pair(path) -> tuple[np.ndarray, dict]:
    raw, meta = _pair(path)
    for f in (raw, meta):
        if not f.exists():
            raise FileNotFoundError(f"missing raw-grid file: {f}")
    sidecar = json.loads(meta.read_text())
    shape = tuple(int(s) for s in sidecar["shape"])
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if payload.size != int(np.prod(shape)):
        raise ShapeMismatchError(
            f"{raw.name}: sidecar shape {shape} needs {int(np.prod(shape))} values, payload has {payload.size}"
        )
    data = payload.reshape(shape).astype(np.float32)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{raw.name}: payload contains non-finite voxels")
    return data, sidecar


def load_volume(path) -> Volume:
    data, sidecar = _read_pair(path)
    return Volume(data, tuple(sidecar["spacing"]), tuple(sidecar.get("intensity_range", (0.0, 1.0))))


def save_labels(labels: np.ndarray, num_classes: int, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    # Label maps reuse the float32 raw-grid format; integer ids are exact in float32.
    v = Volume(np.asarray(labels, dtype=np.float32), spacing, (0.0, float(num_classes - 1)))
    return save_volume(v, path, extra={"num_classes": int(num_classes)})


def load_labels(path) -> tuple[np.ndarray, int]:
    data, sidecar = _read_pair(path)
    return data.astype(np.int64), int(sidecar["num_classes"])


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    entries: list[dict]
    seed: int | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def _resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_volume(self, i: int) -> Volume:
        return load_volume(self._resolve(self.entries[i]["volume_path"]))

    def load_labeled(self, i: int) -> LabeledVolume:
        e = self.entries[i]
        if not e.get("label_path"):
            raise ValueError(f"entry {e['id']} has no label map")
        labels, k = load_labels(self._resolve(e["label_path"]))
        return LabeledVolume(self.load_volume(i), labels, k)

    def shapes(self) -> list[tuple[int, int, int]]:
        out = []
        for e in self.entries:
            _, meta = _pair(self._resolve(e["volume_path"]))
            out.append(tuple(json.loads(meta.read_text())["shape"]))
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"seed": self.seed, "entries": self.entries}, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(doc["entries"], doc.get("seed"), path.parent)


# ---------------------------------------------------------------- synthetic data

BACKGROUND_MEAN = 0.3
BACKGROUND_STD = 0.05
BLOB_INTENSITY = (0.6, 0.9)
SMOOTH_WIDTH = 3


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    """Boolean grid of voxels whose centres satisfy sum(((x - c) / a)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r <= 1.0


def class_intensity(c: int, num_classes: int) -> float:
    """Mean blob intensity for foreground class ``c``; classes are spread over BLOB_INTENSITY."""
    lo, hi = BLOB_INTENSITY
    if num_classes <= 2:
        return (lo + hi) / 2
    return lo + (hi - lo) * (c - 1) / (num_classes - 2)


def synth_volume(shape, num_classes: int, rng: np.random.Generator, blobs_per_class: int = 2) -> LabeledVolume:
    """One noisy volume with ellipsoidal organ-like blobs and its label map.

    Each foreground class gets ``blobs_per_class`` axis-aligned ellipsoids with a
    class-specific intensity; later blobs overwrite earlier ones.
    """
    shape = tuple(int(s) for s in shape)
    data = rng.normal(BACKGROUND_MEAN, BACKGROUND_STD, size=shape)
    labels = np.zeros(shape, dtype=np.int64)
    smallest = min(shape)
    for c in range(1, num_classes):
        for _ in range(blobs_per_class):
            axes = rng.uniform(0.08, 0.2, size=3) * np.array(shape)
            axes = np.maximum(axes, 1.5)
            center = [rng.uniform(a, n - a) if n > 2 * a else n / 2 for a, n in zip(axes, shape)]
            m = ellipsoid_mask(shape, center, axes)
            level = class_intensity(c, num_classes) + rng.uniform(-0.03, 0.03)
            data[m] = level + rng.normal(0.0, BACKGROUND_STD / 2, size=int(m.sum()))
            labels[m] = c
    if smallest >= SMOOTH_WIDTH:
        data = ndimage.uniform_filter(data, size=SMOOTH_WIDTH, mode="nearest")
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return LabeledVolume(Volume(data), labels, num_classes)


def synth_dataset(n: int, shape, num_classes: int, seed: int, out_dir) -> DatasetManifest:
    """Generate ``n`` labeled synthetic volumes under ``out_dir`` and write ``manifest.json``.

    Volume ``i`` is drawn from ``default_rng([seed, i])``, so any prefix of a
    dataset is reproducible on its own.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background + at least one organ)")
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"bad shape {shape}")
    out_dir = Path(out_dir)
    entries = []
    for i in range(n):
        lv = synth_volume(shape, num_classes, np.random.default_rng([seed, i]))
        vid = f"synth_{i:04d}"
        save_volume(lv.volume, out_dir / vid)
        save_labels(lv.labels, num_classes, out_dir / f"{vid}_label")
        entries.append({"id": vid, "volume_path": vid + RAW_SUFFIX, "label_path": f"{vid}_label{RAW_SUFFIX}"})
    manifest = DatasetManifest(entries, seed, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
