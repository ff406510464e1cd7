"""Dice and HD95 on binary masks, plus per-class reports over label maps.

Distances are in pixels (spacing 1.0).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import HierarchySpec


def _check_pair(a: np.ndarray, b: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"{name}: mask shapes {a.shape} and {b.shape} differ")
    return a, b


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1.0."""
    a, b = _check_pair(pred, gt, "dice_score")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask or touching the image border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def _nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd95(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Nearest-rank 95th percentile of the pooled boundary-to-boundary distances.

    Returns ``None`` (undefined) when exactly one of the masks is empty.
    """
    a, b = _check_pair(pred, gt, "hd95")
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    # exact Euclidean distance to the nearest boundary pixel of the other mask
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    pooled = np.concatenate([to_b[ba], to_a[bb]])
    return _nearest_rank(pooled, 95.0)


@dataclass
class ClassReport:
    """Per-class (dice, hd95) plus means; hd95 entries may be ``None`` (undefined)."""

    per_class: dict[str, tuple[float, float | None]] = field(default_factory=dict)
    superclass: dict[str, tuple[float, float | None]] = field(default_factory=dict)
    undefined_hd95: int = 0

    @property
    def mean_dice(self) -> float:
        return float(np.mean([d for d, _ in self.per_class.values()])) if self.per_class else float("nan")

    @property
    def mean_hd95(self) -> float | None:
        vals = [h for _, h in self.per_class.values() if h is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "hd95"])
        for name, (d, h) in list(self.per_class.items()) + [("mean", (self.mean_dice, self.mean_hd95))] \
                + [(f"super_{k}", v) for k, v in self.superclass.items()]:
            w.writerow([name, f"{d:.6f}", "" if h is None else f"{h:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'class':<10}{'dice':>10}{'hd95 (px)':>12}"]
        rows = list(self.per_class.items()) + [("mean", (self.mean_dice, self.mean_hd95))]
        rows += [(f"super_{k}", v) for k, v in self.superclass.items()]
        for name, (d, h) in rows:
            lines.append(f"{name:<10}{d:>10.4f}{'undef' if h is None else f'{h:.3f}':>12}")
        if self.undefined_hd95:
            lines.append(f"({self.undefined_hd95} undefined hd95 entries excluded from means)")
        return "\n".join(lines)


def evaluate(pred: np.ndarray, gt: np.ndarray, hierarchy: HierarchySpec) -> ClassReport:
    """Per-foreground-subclass metrics, plus the foreground superclass after collapsing."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"evaluate: label map shapes {pred.shape} and {gt.shape} differ")
    rep = ClassReport()
    for c in range(1, hierarchy.K):
        h = hd95(pred == c, gt == c)
        rep.per_class[str(c)] = (dice_score(pred == c, gt == c), h)
        rep.undefined_hd95 += h is None
    ps, gs = hierarchy.collapse(pred), hierarchy.collapse(gt)
    for r in range(1, hierarchy.R):
        rep.superclass[str(r)] = (dice_score(ps == r, gs == r), hd95(ps == r, gs == r))
    return rep


def average_reports(reports: list[ClassReport]) -> ClassReport:
    """Average per-class entries over samples; undefined hd95 entries are skipped and counted."""
    out = ClassReport()
    if not reports:
        return out
    for attr in ("per_class", "superclass"):
        keys = getattr(reports[0], attr).keys()
        for k in keys:
            dices = [getattr(r, attr)[k][0] for r in reports]
            hds = [getattr(r, attr)[k][1] for r in reports]
            defined = [h for h in hds if h is not None]
            getattr(out, attr)[k] = (float(np.mean(dices)), float(np.mean(defined)) if defined else None)
            if attr == "per_class":
                out.undefined_hd95 += len(hds) - len(defined)
    return out
