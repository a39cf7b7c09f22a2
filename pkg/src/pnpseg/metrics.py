"""Volume-level segmentation metrics and their aggregation.

Undefined values (Dice with both masks empty, ASD with an empty surface) are
``None`` and render as ``N/A``.  Any ``None`` poisons the aggregate of its
structure.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DimensionError

# 6-connectivity in 3D
CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _same_shape(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def dice(pred, gt, c: int) -> float | None:
    """Dice overlap of class ``c`` in percent."""
    pred, gt = _same_shape(pred, gt)
    p, g = pred == c, gt == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return None
    return 100.0 * 2.0 * int((p & g).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask.

    Voxels on the array border count as touching the outside.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(mask.ndim, 1))
    inner = inner[tuple(slice(1, -1) for _ in range(mask.ndim))]
    return mask & ~inner


def asd(pred, gt, c: int, spacing: Sequence[float] | None = None) -> float | None:
    """Symmetric average surface distance for class ``c``.

    Mean of the two directed averages of nearest-surface distances.  Units
    follow ``spacing`` (voxels by default).
    """
    pred, gt = _same_shape(pred, gt)
    sp = surface(pred == c)
    sg = surface(gt == c)
    if not sp.any() or not sg.any():
        return None
    sampling = None if spacing is None else tuple(float(s) for s in spacing)
    # distance from every voxel to the nearest surface voxel of the other mask
    to_g = ndimage.distance_transform_edt(~sg, sampling=sampling)
    to_p = ndimage.distance_transform_edt(~sp, sampling=sampling)
    return 0.5 * (float(to_g[sp].mean()) + float(to_p[sg].mean()))


def largest_cc(pred, num_classes: int | None = None) -> np.ndarray:
    """Keep only the largest 6-connected component of every foreground class."""
    pred = np.asarray(pred)
    out = pred.copy()
    classes = range(1, num_classes) if num_classes else [c for c in np.unique(pred) if c != 0]
    for c in classes:
        comp, n = ndimage.label(pred == c, structure=CONNECTIVITY)
        if n <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        # argmax picks the first maximum, i.e. the lowest label in scan order
        keep = int(np.argmax(sizes)) + 1
        out[(comp > 0) & (comp != keep)] = 0
    return out


def aggregate(values: Iterable[float | None]) -> tuple[float, float] | None:
    """Mean and population standard deviation; ``None`` if any value is N/A."""
    values = list(values)
    if not values:
        raise ArgumentError("cannot aggregate an empty list")
    if any(v is None for v in values):
        return None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def format_mean_std(agg: tuple[float, float] | None, digits: int = 1) -> str:
    if agg is None:
        return "N/A"
    return f"{agg[0]:.{digits}f}±{agg[1]:.{digits}f}"


def evaluate_subject(pred, gt, num_classes: int, spacing=None) -> list[dict]:
    """Per-class Dice and ASD rows for one subject (foreground classes only)."""
    return [
        {"class": c, "dice": dice(pred, gt, c), "asd": asd(pred, gt, c, spacing)}
        for c in range(1, num_classes)
    ]


METRIC_FIELDS = ("subject", "class", "dice", "asd")


def _cell(v):
    return "" if v is None else repr(float(v))


def write_metrics_csv(rows: Iterable[dict], path: str | Path) -> Path:
    """``subject,class,dice,asd`` with an empty cell for N/A."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["subject"], r["class"], _cell(r["dice"]), _cell(r["asd"])])
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as f:
        for r in csv.DictReader(f):
            rows.append({
                "subject": r["subject"],
                "class": int(r["class"]),
                "dice": float(r["dice"]) if r["dice"] else None,
                "asd": float(r["asd"]) if r["asd"] else None,
            })
    return rows


def summarize(rows: Sequence[dict], num_classes: int) -> dict:
    """Per-class and mean-column aggregates from per-subject metric rows.

    The mean column aggregates each subject's class-averaged value, so its
    std is the cross-subject spread.
    """
    by_class = {c: [r for r in rows if r["class"] == c] for c in range(1, num_classes)}
    out = {}
    for key in ("dice", "asd"):
        per_class = {c: aggregate([r[key] for r in rs]) if rs else None for c, rs in by_class.items()}
        subjects = sorted({r["subject"] for r in rows})
        per_subject = []
        for s in subjects:
            vals = [r[key] for r in rows if r["subject"] == s]
            per_subject.append(None if any(v is None for v in vals) else float(np.mean(vals)))
        out[key] = {"per_class": per_class,
                    "mean": aggregate(per_subject) if per_subject else None}
    return out


def mean_foreground_dice(rows: Sequence[dict]) -> float:
    """Average Dice over subjects and foreground classes, skipping undefined cells."""
    vals = [r["dice"] for r in rows if r["dice"] is not None]
    return float(np.mean(vals)) if vals else math.nan
