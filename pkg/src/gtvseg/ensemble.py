"""Whole-volume inference, model fusion, postprocessing and ensemble uncertainty."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from .autograd import Tensor
from .errors import DegenerateInputError, ShapeError
from .nn import NetworkParams, unet_forward
from .preprocess import TARGET_SPACING, RegionBox, compute_region, preprocess, resample, truncate_hu
from .volume import LabelMask, Volume

_FACE = ndimage.generate_binary_structure(3, 1)


@dataclass
class ProbabilityMap:
    """Two-channel ``(2, D, H, W)`` class probabilities on a voxel grid."""

    data: np.ndarray
    spacing: tuple[float, float, float] = TARGET_SPACING

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ShapeError(f"ProbabilityMap needs shape (2, D, H, W), got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def foreground(self) -> np.ndarray:
        return self.data[1]


# --------------------------------------------------------------------------
# inference


def window_starts(n: int, p: int) -> list[int]:
    """Starts with stride ``p // 2`` plus a final window flush with the far edge."""
    if n <= p:
        return [0]
    stride = max(1, p // 2)
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def sliding_window_predict(params: NetworkParams, v: Volume, batch: int = 1) -> ProbabilityMap:
    """Tile a preprocessed volume with half-overlapping patches and average the outputs."""
    patch = params.config.patch_shape
    img = v.data
    shape = img.shape
    pad = [max(0, p - n) for p, n in zip(patch, shape)]
    if any(pad):
        img = np.pad(img, [(0, q) for q in pad], constant_values=img.min())
    full = img.shape
    acc = np.zeros((2,) + full, dtype=np.float64)
    hits = np.zeros(full, dtype=np.int32)
    corners = list(itertools.product(*(window_starts(n, p) for n, p in zip(full, patch))))
    for i in range(0, len(corners), batch):
        chunk = corners[i:i + batch]
        x = np.stack([img[c[0]:c[0] + patch[0], c[1]:c[1] + patch[1], c[2]:c[2] + patch[2]] for c in chunk])
        out = unet_forward(Tensor(x[:, None]), params, mode="eval").data
        for c, o in zip(chunk, out):
            sl = tuple(slice(ci, ci + p) for ci, p in zip(c, patch))
            acc[(slice(None),) + sl] += o
            hits[sl] += 1
    acc /= hits
    acc = acc[:, : shape[0], : shape[1], : shape[2]]
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityMap(acc.astype(np.float32), v.spacing)


def ensemble_average(maps: Sequence[ProbabilityMap]) -> ProbabilityMap:
    if not maps:
        raise ValueError("ensemble_average: no maps given")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ShapeError(f"ensemble_average: map shape {m.data.shape} differs from {shape}")
    # summing sorted values makes the mean exactly independent of model order
    stack = np.sort(np.stack([m.data.astype(np.float64) for m in maps]), axis=0)
    mean = stack.sum(axis=0) / len(maps)
    return ProbabilityMap(mean.astype(np.float32), maps[0].spacing)


def binarize(pm: ProbabilityMap) -> LabelMask:
    """Foreground where p_fg > p_bg; ties go to background."""
    return LabelMask((pm.data[1] > pm.data[0]).astype(np.uint8), pm.spacing)


def largest_connected_component(m: LabelMask) -> LabelMask:
    """Keep the largest 6-connected component; ties go to the one seen first in raster order."""
    labels, n = ndimage.label(m.data, structure=_FACE)
    if n <= 1:
        return LabelMask(m.data.copy(), m.spacing)
    # ndimage numbers components by their first voxel in C order, so argmax picks
    # the lexicographically smallest seed among equally large components
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    return LabelMask((labels == keep).astype(np.uint8), m.spacing)


# --------------------------------------------------------------------------
# uncertainty


def _stack_masks(masks: Sequence[LabelMask], min_count: int = 2) -> np.ndarray:
    if len(masks) < min_count:
        raise ValueError(f"need at least {min_count} masks, got {len(masks)}")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ShapeError(f"mask shape {m.shape} differs from {shape}")
    return np.stack([m.data for m in masks])


def split_entropy(k: int, n: int) -> float:
    """Entropy (nats) of ``k`` foreground votes out of ``n``."""
    out = 0.0
    for c in (k, n - k):
        if c:
            p = c / n
            out -= p * math.log(p)
    return out


def pixelwise_entropy(masks: Sequence[LabelMask]) -> np.ndarray:
    """Per-voxel entropy of the label frequencies across ``masks``."""
    stack = _stack_masks(masks)
    n = len(masks)
    votes = stack.sum(axis=0, dtype=np.int64)
    table = np.array([split_entropy(k, n) for k in range(n + 1)])
    return table[votes]


def vvc(masks: Sequence[LabelMask]) -> float:
    """Population std over mean of the members' foreground voxel counts."""
    stack = _stack_masks(masks)
    vols = stack.reshape(len(masks), -1).sum(axis=1, dtype=np.int64).astype(np.float64)
    mu = vols.mean()
    if mu == 0:
        raise DegenerateInputError("vvc: all masks are empty")
    return float(vols.std() / mu)


@dataclass(frozen=True)
class LevelRow:
    level: int
    entropy: float
    error_rate: float
    voxels: int


def error_rate_by_level(
    per_model_masks: Sequence[LabelMask],
    fused: LabelMask,
    gt: LabelMask,
    roi: RegionBox,
) -> list[LevelRow]:
    """Error rate of ``fused`` against ``gt`` inside ``roi``, split by vote agreement.

    Level ``j`` (1-based) holds voxels where the minority vote count is
    ``j - 1``, so level 1 is full agreement (entropy 0). Levels without voxels
    in the roi are omitted.
    """
    stack = _stack_masks(per_model_masks)
    n = len(per_model_masks)
    if fused.shape != stack.shape[1:] or gt.shape != fused.shape:
        raise ShapeError("error_rate_by_level: fused, gt and member masks must share a shape")
    if not roi.fits(fused.shape):
        raise ShapeError(f"error_rate_by_level: roi {roi.bounds} exceeds volume {fused.shape}")
    sl = roi.slices
    votes = stack[(slice(None),) + sl].sum(axis=0, dtype=np.int64)
    if votes.size == 0:
        raise DegenerateInputError("error_rate_by_level: empty roi")
    minority = np.minimum(votes, n - votes)
    wrong = fused.data[sl] != gt.data[sl]
    rows = []
    for j in range(n // 2 + 1):
        at = minority == j
        count = int(at.sum())
        if count:
            rows.append(LevelRow(j + 1, split_entropy(j, n), float(wrong[at].sum()) / count, count))
    return rows


@dataclass(frozen=True)
class Scatter:
    points: list[tuple[float, float]]
    spearman: float


def vvc_dice_scatter(results: Sequence[tuple[float, float]]) -> Scatter:
    """Pairs ``(vvc, 1 - dice)`` and their Spearman rank correlation (nan if undefined)."""
    if len(results) < 2:
        raise ValueError("vvc_dice_scatter needs at least two cases")
    pts = [(float(v), 1.0 - float(d)) for v, d in results]
    x, y = np.array(pts).T
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        rho = math.nan
    else:
        rho = float(stats.spearmanr(x, y).statistic)
    return Scatter(pts, rho)


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class EnsembleResult:
    mean: ProbabilityMap
    fused: LabelMask
    uncertainty: np.ndarray | None
    per_model: list[LabelMask]
    vvc: float | None
    member_maps: list[ProbabilityMap] | None = None


def _to_grid(pm: ProbabilityMap, shape, spacing) -> ProbabilityMap:
    if pm.shape == tuple(shape) and pm.spacing == tuple(spacing):
        return pm
    chans = [resample(Volume(c, pm.spacing), spacing, out_shape=shape).data for c in pm.data]
    d = np.clip(np.stack(chans).astype(np.float64), 0.0, None)
    d /= np.maximum(d.sum(axis=0, keepdims=True), 1e-12)
    return ProbabilityMap(d, spacing)


def ensemble_predict(models: Sequence[NetworkParams], v: Volume, keep_member_maps: bool = False) -> EnsembleResult:
    """Predict an HU volume with every model, fuse, and quantify disagreement.

    Member masks are each model's own argmax followed by its own LCC; the
    fused mask is the LCC of the argmax of the mean map. Outputs live on the
    input volume's grid.
    """
    if not models:
        raise ValueError("ensemble_predict: no models given")
    x = preprocess(v)
    maps = [_to_grid(sliding_window_predict(p, x), v.shape, v.spacing) for p in models]
    mean = ensemble_average(maps)
    fused = largest_connected_component(binarize(mean))
    members = [largest_connected_component(binarize(m)) for m in maps]
    unc = vvc_value = None
    if len(models) >= 2:
        unc = pixelwise_entropy(members)
        try:
            vvc_value = vvc(members)
        except DegenerateInputError:
            vvc_value = math.nan
    return EnsembleResult(mean, fused, unc, members, vvc_value, maps if keep_member_maps else None)


def head_roi(v: Volume) -> RegionBox:
    """Body bounding box of an HU volume, used as the error-rate roi."""
    return compute_region(truncate_hu(v), "middle")
