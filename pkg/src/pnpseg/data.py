"""Volumes, slice extraction, augmentation and the two-modality phantom.

On-disk volume format: a JSON sidecar plus raw little-endian arrays::

    {
      "shape": [Z, Y, X],
      "spacing": [sz, sy, sx],
      "dtype": "<f4",
      "modality": "A",
      "subject": "A-train-000",
      "intensity_path": "A-train-000.f32",
      "label_path": "A-train-000.u8"      # or null
    }

Paths are relative to the sidecar.  Arrays are C-ordered.  Slicing for the
network happens along axis 1 (the coronal axis in ``(z, y, x)`` order).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import (ArgumentError, DegenerateInputError, FormatError,
                     TargetLabelAccessError)

CORONAL_AXIS = 1
INTENSITY_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "A"
    labels: np.ndarray | None = None
    subject: str = ""

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise FormatError(f"intensities must be 3D, got shape {self.intensities.shape}")
        if self.labels is not None and self.labels.shape != self.intensities.shape:
            raise FormatError(
                f"labels shape {self.labels.shape} != intensities shape {self.intensities.shape}")

    @property
    def n_slices(self) -> int:
        return self.intensities.shape[CORONAL_AXIS]


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Write ``volume`` as ``<path>.json`` + raw arrays next to it."""
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    inten = np.ascontiguousarray(volume.intensities, dtype=INTENSITY_DTYPE)
    (path.parent / f"{stem}.f32").write_bytes(inten.tobytes())
    label_path = None
    if volume.labels is not None:
        label_path = f"{stem}.u8"
        labels = np.ascontiguousarray(volume.labels, dtype=LABEL_DTYPE)
        (path.parent / label_path).write_bytes(labels.tobytes())
    header = {
        "shape": list(inten.shape),
        "spacing": [float(s) for s in volume.spacing],
        "dtype": INTENSITY_DTYPE.str,
        "modality": volume.modality,
        "subject": volume.subject or stem,
        "intensity_path": f"{stem}.f32",
        "label_path": label_path,
    }
    path.write_text(json.dumps(header, indent=2))
    return path


def _read_raw(path: Path, dtype: np.dtype, shape) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"raw file {path} is missing")
    data = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{path.name}: expected {expected} bytes for shape {list(shape)}, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        dtype = np.dtype(header.get("dtype", INTENSITY_DTYPE.str))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad volume header {path}: {e}") from e
    if len(shape) != 3 or dtype != INTENSITY_DTYPE:
        raise FormatError(f"{path}: need a 3D little-endian float32 volume, got {shape} {dtype}")
    inten = _read_raw(path.parent / header["intensity_path"], INTENSITY_DTYPE, shape)
    labels = None
    if header.get("label_path"):
        labels = _read_raw(path.parent / header["label_path"], LABEL_DTYPE, shape)
    return Volume(inten, tuple(header.get("spacing", (1.0, 1.0, 1.0))),
                  header.get("modality", ""), labels, header.get("subject", path.stem))


def normalize(volume: Volume) -> Volume:
    """Zero-mean, unit-variance intensities over the whole volume."""
    x = volume.intensities.astype(np.float64)
    std = x.std()
    if not np.isfinite(std) or std == 0:
        raise DegenerateInputError(f"volume {volume.subject!r} has constant intensities")
    z = (x - x.mean()) / std
    return dataclasses.replace(volume, intensities=z.astype(np.float32))


# ---------------------------------------------------------------- slices

@dataclass
class SliceSample:
    channels: np.ndarray            # (3, S, S) float32
    label: np.ndarray | None        # (S, S) integer, middle slice


def _fit(img: np.ndarray, size: int, order: int) -> np.ndarray:
    """Center-crop to a square, then resize to ``size``."""
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = img[top:top + s, left:left + s]
    if s == size:
        return img
    return ndimage.zoom(img, size / s, order=order, mode="nearest", grid_mode=True)


def sample_slices(volume: Volume, index: int, input_size: int, with_label: bool = True) -> SliceSample:
    """Three adjacent coronal slices centred on ``index``; edges replicate."""
    n = volume.n_slices
    if not 0 <= index < n:
        raise ArgumentError(f"slice index {index} outside [0, {n})")
    if with_label and volume.labels is None:
        raise ArgumentError(f"volume {volume.subject!r} has no labels")
    idx = [min(max(i, 0), n - 1) for i in (index - 1, index, index + 1)]
    chans = np.stack([_fit(np.take(volume.intensities, i, axis=CORONAL_AXIS), input_size, 1)
                      for i in idx]).astype(np.float32)
    label = None
    if with_label:
        label = _fit(np.take(volume.labels, index, axis=CORONAL_AXIS), input_size, 0)
    return SliceSample(chans, label)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 0.0     # uniform in [-r, r]
    zoom: float = 0.0             # scale uniform in [1-z, 1+z]
    shear: float = 0.0            # uniform in [-s, s]

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.zoom == 0 and self.shear == 0


def apply_affine(sample: SliceSample, angle_deg: float = 0.0, scale: float = 1.0,
                 shear: float = 0.0) -> SliceSample:
    """Rotate/zoom/shear about the image centre; bilinear for intensities,
    nearest for labels.  Positive angles rotate counter-clockwise in array
    display orientation (rows downward), matching ``np.rot90``."""
    size = sample.channels.shape[-1]
    t = math.radians(angle_deg)
    # forward map in (row, col); affine_transform wants its inverse (output -> input)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    fwd = rot @ sh * scale
    inv = np.linalg.inv(fwd)
    c = np.array([(size - 1) / 2.0] * 2)
    offset = c - inv @ c
    chans = np.stack([ndimage.affine_transform(ch, inv, offset, order=1, mode="nearest")
                      for ch in sample.channels]).astype(np.float32)
    label = None
    if sample.label is not None:
        label = ndimage.affine_transform(sample.label, inv, offset, order=0, mode="nearest")
    return SliceSample(chans, label)


def augment(sample: SliceSample, config: AugmentConfig, rng: np.random.Generator) -> SliceSample:
    if config.is_identity:
        return SliceSample(sample.channels.copy(),
                           None if sample.label is None else sample.label.copy())
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    scale = rng.uniform(1 - config.zoom, 1 + config.zoom)
    shear = rng.uniform(-config.shear, config.shear)
    return apply_affine(sample, angle, scale, shear)


def batch_augmenter(config: AugmentConfig):
    """Adapter for ``segnet.train_source``'s per-batch augmentation hook."""
    def _aug(images: torch.Tensor, labels: torch.Tensor, rng: np.random.Generator):
        xs, ys = [], []
        for x, y in zip(images.numpy(), labels.numpy()):
            s = augment(SliceSample(x, y), config, rng)
            xs.append(s.channels)
            ys.append(s.label)
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)).long()
    return _aug


class SliceDataset:
    """In-memory stack of network inputs with optional labels."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor | None = None,
                 subjects: Sequence[str] = ()):
        if labels is not None and labels.shape[0] != images.shape[0]:
            raise ArgumentError("images and labels disagree in length")
        self.images = images
        self._labels = labels
        self.subjects = list(subjects)

    def __len__(self):
        return self.images.shape[0]

    @property
    def labels(self) -> torch.Tensor:
        if self._labels is None:
            raise ArgumentError("dataset is unlabelled")
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def unlabelled(self) -> "UnlabelledView":
        return UnlabelledView(self)


class UnlabelledView:
    """Wraps a dataset so that any attempt to read its labels raises."""

    def __init__(self, dataset):
        object.__setattr__(self, "_inner", dataset)

    @property
    def images(self) -> torch.Tensor:
        return self._inner.images

    def __len__(self):
        return len(self._inner)

    @property
    def labels(self):
        raise TargetLabelAccessError("target-domain labels must not be read during adaptation")

    def __getattr__(self, name):
        if "label" in name:
            raise TargetLabelAccessError(f"access to {name!r} on an unlabelled target dataset")
        return getattr(self._inner, name)


def slice_dataset(volumes: Sequence[Volume], input_size: int, with_labels: bool = True,
                  normalized: bool = True) -> SliceDataset:
    """Every coronal slice triplet of every volume, in volume then slice order."""
    xs, ys = [], []
    for v in volumes:
        v = normalize(v) if normalized else v
        for i in range(v.n_slices):
            s = sample_slices(v, i, input_size, with_label=with_labels)
            xs.append(s.channels)
            if with_labels:
                ys.append(s.label.astype(np.int64))
    images = torch.from_numpy(np.stack(xs))
    labels = torch.from_numpy(np.stack(ys)) if with_labels else None
    return SliceDataset(images, labels, [v.subject for v in volumes])


# ---------------------------------------------------------------- phantom

STRUCTURES = ("AA", "LA-blood", "LV-blood", "LV-myo")

# per-class mean intensity: background air, background tissue, then STRUCTURES
_DEFAULT_TABLES = {
    "A": (0.0, 0.30, 1.00, 0.80, 0.60, 0.45),
    "B": (1.0, 0.70, 0.10, 0.30, 0.45, 0.85),
}


@dataclass
class PhantomConfig:
    size: int = 64
    n_train: int = 8
    n_test: int = 4
    num_structures: int = 4
    noise: float = 0.05
    zoom: float = 1.25   # field-of-view crop about the centre
    tables: dict = field(default_factory=lambda: {k: list(v) for k, v in _DEFAULT_TABLES.items()})

    @property
    def num_classes(self) -> int:
        return self.num_structures + 1

    def validate(self):
        if self.num_structures != len(STRUCTURES):
            raise ArgumentError(f"phantom supports exactly {len(STRUCTURES)} structures, got {self.num_structures}")
        if self.size < 16 or self.n_train < 1 or self.n_test < 1 or self.noise < 0 or self.zoom <= 0:
            raise ArgumentError("phantom size >= 16, at least one subject per split, noise >= 0, zoom > 0")
        for mod, t in self.tables.items():
            if len(t) != self.num_structures + 2:
                raise ArgumentError(f"intensity table {mod!r} needs {self.num_structures + 2} entries")


def _ellipsoid(grid, center, radii, rot):
    d = np.stack([g - c for g, c in zip(grid, center)], axis=-1) @ rot
    return ((d / np.asarray(radii)) ** 2).sum(-1) <= 1.0


def _rotation(rng, max_angle):
    a = rng.uniform(-max_angle, max_angle, size=3)
    cx, cy, cz = np.cos(a)
    sx, sy, sz = np.sin(a)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def phantom_labels(size: int, rng: np.random.Generator, zoom: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Random heart-like label geometry and a body mask, on a ``size``^3 grid.

    ``zoom`` > 1 narrows the field of view about the centre, like a crop
    around the heart.
    """
    ax = 0.5 + ((np.arange(size) + 0.5) / size - 0.5) / zoom
    grid = np.meshgrid(ax, ax, ax, indexing="ij")
    j = lambda s: rng.uniform(-s, s)
    body = _ellipsoid(grid, (0.5 + j(0.02), 0.5 + j(0.02), 0.5 + j(0.02)),
                      (0.44 + j(0.02), 0.46 + j(0.02), 0.46 + j(0.02)), _rotation(rng, 0.2))
    rot = _rotation(rng, 0.25)
    lv_c = np.array([0.56 + j(0.03), 0.5 + j(0.03), 0.58 + j(0.03)])
    lv_r = np.array([0.17 + j(0.02), 0.18 + j(0.02), 0.15 + j(0.02)])
    myo_t = 0.09 + j(0.01)
    lv = _ellipsoid(grid, lv_c, lv_r, rot)
    myo = _ellipsoid(grid, lv_c, lv_r + myo_t, rot) & ~lv
    la = _ellipsoid(grid, lv_c + rot @ np.array([-0.33 + j(0.02), 0.0 + j(0.03), -0.16 + j(0.02)]),
                    (0.16 + j(0.015), 0.18 + j(0.02), 0.16 + j(0.015)), rot)
    aa = _ellipsoid(grid, lv_c + rot @ np.array([-0.12 + j(0.02), 0.03 + j(0.02), -0.38 + j(0.02)]),
                    (0.28 + j(0.02), 0.12 + j(0.01), 0.12 + j(0.01)), rot)
    labels = np.zeros((size,) * 3, np.uint8)
    # later structures win overlaps
    for cls, mask in ((4, myo), (3, lv), (2, la & ~myo & ~lv), (1, aa & ~myo & ~lv)):
        labels[mask & body] = cls
    return labels, body


def render(labels: np.ndarray, body: np.ndarray, table: Sequence[float], noise: float,
           rng: np.random.Generator) -> np.ndarray:
    lut = np.asarray(table, dtype=np.float64)
    # index 0 = air outside the body, 1 = background tissue, 2.. = structures
    idx = np.where(labels > 0, labels.astype(np.int64) + 1, body.astype(np.int64))
    img = lut[idx] + rng.normal(0.0, noise, size=labels.shape)
    return img.astype(np.float32)


def gen_phantom(cfg: PhantomConfig, seed: int = 0, modalities: tuple[str, str] = ("A", "B")):
    """Two unpaired modalities, each a dict ``{"train": [...], "test": [...]}`` of Volumes.

    Every subject gets its own geometry, so no anatomy is shared across
    modalities; only the geometry family and label vocabulary are common.
    """
    cfg.validate()
    for m in modalities:
        if m not in cfg.tables:
            raise ArgumentError(f"no intensity table for modality {m!r}")
    out = []
    for mi, mod in enumerate(modalities):
        splits = {}
        for si, (split, n) in enumerate((("train", cfg.n_train), ("test", cfg.n_test))):
            vols = []
            for k in range(n):
                rng = np.random.default_rng(np.random.SeedSequence((seed, mi, si, k)))
                labels, body = phantom_labels(cfg.size, rng, cfg.zoom)
                img = render(labels, body, cfg.tables[mod], cfg.noise, rng)
                vols.append(Volume(img, (1.0, 1.0, 1.0), mod, labels, f"{mod}-{split}-{k:03d}"))
            splits[split] = vols
        out.append(splits)
    return tuple(out)


def write_dataset(splits_by_modality: dict[str, dict[str, list[Volume]]], root: str | Path,
                  config: dict | None = None) -> Path:
    """Write volumes plus a ``dataset.json`` manifest listing subject IDs per split."""
    root = Path(root)
    manifest = {"modalities": {}, "config": config or {}}
    for mod, splits in splits_by_modality.items():
        manifest["modalities"][mod] = {}
        for split, vols in splits.items():
            ids = []
            for v in vols:
                save_volume(v, root / "volumes" / v.subject)
                ids.append(v.subject)
            manifest["modalities"][mod][split] = ids
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return root / "dataset.json"


def read_dataset(root: str | Path, modality: str, split: str) -> list[Volume]:
    root = Path(root)
    try:
        manifest = json.loads((root / "dataset.json").read_text())
        ids = manifest["modalities"][modality][split]
    except FileNotFoundError as e:
        raise FormatError(f"no dataset manifest under {root}") from e
    except KeyError as e:
        raise ArgumentError(f"dataset has no {modality}/{split} split") from e
    return [load_volume(root / "volumes" / f"{i}.json") for i in ids]
