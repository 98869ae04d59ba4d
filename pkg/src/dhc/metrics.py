"""Per-class Dice and average surface distance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .core import LabelMap, ProbMap, Volume, argmax_labels

SIX_CONNECTED = generate_binary_structure(3, 1)


def _arrays(pred, gt):
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"dim mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt, k: int) -> Optional[float]:
    p, g = _arrays(pred, gt)
    pm, gm = p == k, g == k
    total = int(pm.sum()) + int(gm.sum())
    if total == 0:
        return None
    return 2.0 * int((pm & gm).sum()) / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    interior = binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~interior


def asd(pred, gt, k: int, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Symmetric average surface distance between the class-``k`` masks.

    Mean of the two directed means of nearest boundary-to-boundary distances
    between spacing-scaled voxel centers.
    """
    p, g = _arrays(pred, gt)
    bp = np.argwhere(boundary_voxels(p == k)) * np.asarray(spacing, dtype=np.float64)
    bg = np.argwhere(boundary_voxels(g == k)) * np.asarray(spacing, dtype=np.float64)
    if len(bp) == 0 or len(bg) == 0:
        return None
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


@dataclass
class ClassReport:
    """Foreground-class metrics; index ``i`` refers to class ``i + 1``."""
    dice: list[Optional[float]]
    asd: list[Optional[float]]

    @staticmethod
    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dice(self) -> Optional[float]:
        return self._mean(self.dice)

    @property
    def mean_asd(self) -> Optional[float]:
        return self._mean(self.asd)


def class_report(pred, gt, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> ClassReport:
    ks = range(1, num_classes)
    return ClassReport([dice_score(pred, gt, k) for k in ks], [asd(pred, gt, k, spacing) for k in ks])


def mean_report(reports: Sequence[ClassReport]) -> ClassReport:
    """Per-class means over volumes, skipping missing entries."""
    if not reports:
        raise ValueError("no reports to average")
    n = len(reports[0].dice)
    dice = [ClassReport._mean([r.dice[i] for r in reports]) for i in range(n)]
    asds = [ClassReport._mean([r.asd[i] for r in reports]) for i in range(n)]
    return ClassReport(dice, asds)


def evaluate(predict: Callable[[Volume], ProbMap], eval_set: Sequence[tuple[Volume, LabelMap]]) -> list[ClassReport]:
    """Per-volume reports of ``predict`` over an evaluation set."""
    if not eval_set:
        raise ValueError("empty evaluation set")
    reports = []
    for v, gt in eval_set:
        pred = argmax_labels(predict(v))
        reports.append(class_report(pred, gt, gt.num_classes, v.spacing))
    return reports
