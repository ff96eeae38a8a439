"""Overlap, surface-distance and volume metrics for binary masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, ShapeError
from .volume import LabelMask

_FACE = ndimage.generate_binary_structure(3, 1)


def _arr(m) -> np.ndarray:
    a = m.data if isinstance(m, LabelMask) else np.asarray(m)
    if a.ndim != 3:
        raise ShapeError(f"expected a 3-d mask, got shape {a.shape}")
    return a.astype(bool, copy=False)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt) -> tuple[int, int, int]:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def dice_score(pred, gt) -> float:
    """2TP / (2TP + FP + FN); two empty masks score 1.0."""
    tp, fp, fn = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def surface_points(m, spacing=None) -> np.ndarray:
    """Physical centres (mm) of foreground voxels with a background face neighbour.

    Voxels on the grid border count as surface. Returns an ``(n, 3)`` array.
    """
    a = _arr(m)
    if spacing is None:
        spacing = m.spacing if isinstance(m, LabelMask) else (1.0, 1.0, 1.0)
    if not a.any():
        raise DegenerateInputError("surface_points: empty mask has no surface")
    interior = ndimage.binary_erosion(a, structure=_FACE, border_value=0)
    idx = np.argwhere(a & ~interior)
    return idx * np.asarray(spacing, dtype=np.float64)


def assd(pred, gt, spacing=None) -> float:
    """Average symmetric surface distance in mm; ``nan`` when either mask is empty."""
    p, g = _pair(pred, gt)
    if spacing is None:
        spacing = next((m.spacing for m in (pred, gt) if isinstance(m, LabelMask)), (1.0, 1.0, 1.0))
    if not p.any() or not g.any():
        return math.nan
    s = surface_points(p, spacing)
    t = surface_points(g, spacing)
    d_st, _ = cKDTree(t).query(s)
    d_ts, _ = cKDTree(s).query(t)
    return float((d_st.sum() + d_ts.sum()) / (len(s) + len(t)))


def rve(pred, gt) -> float:
    """|V_pred - V_gt| / V_gt in percent. Not symmetric."""
    p, g = _pair(pred, gt)
    vg = int(np.count_nonzero(g))
    if vg == 0:
        raise DegenerateInputError("rve: ground-truth mask is empty")
    return abs(int(np.count_nonzero(p)) - vg) / vg * 100.0


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    assd: float
    rve: float
    tp: int
    fp: int
    fn: int

    def to_record(self, case_id: str | None = None) -> dict:
        rec = {} if case_id is None else {"case_id": case_id}
        rec.update(
            dice=self.dice,
            assd_mm=None if math.isnan(self.assd) else self.assd,
            rve_percent=self.rve,
            tp=self.tp,
            fp=self.fp,
            fn=self.fn,
        )
        return rec


def evaluate(pred, gt, spacing=None) -> MetricsReport:
    tp, fp, fn = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    d = 1.0 if denom == 0 else 2.0 * tp / denom
    return MetricsReport(d, assd(pred, gt, spacing), rve(pred, gt), tp, fp, fn)


__all__ = ["MetricsReport", "assd", "confusion", "dice_score", "evaluate", "rve", "surface_points"]
