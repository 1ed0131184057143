"""Evaluation metrics: per-class Dice, mDice over organ classes, and HD95."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from pgseg.errors import ShapeError
from pgseg.vocab import CLASS_NAMES, DISPLAY_NAMES, ORGANS, TABLE_ORDER

_CROSS = generate_binary_structure(2, 1)


def dice_score(pred: np.ndarray, target: np.ndarray, class_id: int) -> float:
    """``2|A∩B| / (|A|+|B|)`` for one class; 1.0 when both are empty."""
    a = np.asarray(pred) == class_id
    b = np.asarray(target) == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mdice(pred: np.ndarray, target: np.ndarray, classes: Iterable[int] = range(1, len(CLASS_NAMES))) -> float:
    return float(np.mean([dice_score(pred, target, c) for c in classes]))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Nearest boundary-to-boundary distances, both directions pooled."""
    bp, bt = boundary(pred), boundary(target)
    to_t = distance_transform_edt(~bt)
    to_p = distance_transform_edt(~bp)
    return np.concatenate([to_t[bp], to_p[bt]])


def hd95(pred: np.ndarray, target: np.ndarray) -> float:
    """95th percentile (linear interpolation) of pooled symmetric surface distances.

    Returns NaN when either mask is empty; callers treat NaN as "undefined"
    and exclude it from averages.
    """
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    if not pred.any() or not target.any():
        return math.nan
    return float(np.percentile(surface_distances(pred, target), 95))


@dataclass
class MetricReport:
    case_id: str
    per_class_dice: dict[str, float]
    per_class_hd95: dict[str, float] = field(default_factory=dict)

    @property
    def mdice(self) -> float:
        return float(np.mean(list(self.per_class_dice.values())))

    @property
    def hd95(self) -> float:
        vals = [v for v in self.per_class_hd95.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def hd95_undefined(self) -> int:
        return sum(math.isnan(v) for v in self.per_class_hd95.values())


def evaluate_case(pred: np.ndarray, target: np.ndarray, case_id: str, organs: Sequence[str] = ORGANS) -> MetricReport:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and label {target.shape} differ")
    dice, dist = {}, {}
    for organ in organs:
        c = CLASS_NAMES.index(organ)
        dice[organ] = dice_score(pred, target, c)
        dist[organ] = hd95(pred == c, target == c)
    return MetricReport(case_id=case_id, per_class_dice=dice, per_class_hd95=dist)


def summarize(reports: Sequence[MetricReport], organs: Sequence[str] = TABLE_ORDER) -> dict:
    """Table-shaped summary: one Dice column per organ, then mDice and HD95.

    Per-organ values average over cases; HD95 averages the per-organ means
    that are defined. Values are fractions (Dice) and pixels (HD95).
    """
    if not reports:
        raise ValueError("no reports to summarize")
    out: dict = {}
    organ_hd = []
    undefined = 0
    for organ in organs:
        out[DISPLAY_NAMES[organ]] = float(np.mean([r.per_class_dice[organ] for r in reports]))
        hds = [r.per_class_hd95[organ] for r in reports]
        defined = [h for h in hds if not math.isnan(h)]
        undefined += len(hds) - len(defined)
        if defined:
            organ_hd.append(float(np.mean(defined)))
    out["mDice"] = float(np.mean([out[DISPLAY_NAMES[o]] for o in organs]))
    out["HD95"] = float(np.mean(organ_hd)) if organ_hd else None
    out["hd95_undefined"] = undefined
    out["n_cases"] = len(reports)
    return out


def write_csv(reports: Sequence[MetricReport], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "organ", "dice", "hd95"])
        for r in reports:
            for organ, d in r.per_class_dice.items():
                h = r.per_class_hd95.get(organ, math.nan)
                w.writerow([r.case_id, organ, f"{d:.6f}", "" if math.isnan(h) else f"{h:.6f}"])
    return path


def write_summary(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2) + "\n")
    return path
