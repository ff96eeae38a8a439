"""Volume and label-mask containers with physical voxel spacing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def _spacing(s) -> tuple[float, float, float]:
    s = tuple(float(v) for v in s)
    if len(s) != 3 or not all(np.isfinite(v) and v > 0 for v in s):
        raise ValueError(f"spacing must be three positive finite values in mm, got {s}")
    return s


@dataclass
class Volume:
    """Scalar grid ``(D, H, W)``; spacing is ``(sz, sy, sx)`` in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"Volume needs a non-empty 3-d array, got shape {self.data.shape}")
        self.spacing = _spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMask:
    """Binary grid ``(D, H, W)`` stored as uint8."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"LabelMask needs a non-empty 3-d array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.dtype == bool:
                arr = arr.astype(np.uint8)
            else:
                vals = np.unique(arr)
                if not np.isin(vals, (0, 1)).all():
                    raise ValueError(f"LabelMask values must be 0 or 1, found {vals[:10]}")
                arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ValueError("LabelMask values must be 0 or 1")
        self.data = arr
        self.spacing = _spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def volume_voxels(self) -> int:
        return int(self.data.sum(dtype=np.int64))
