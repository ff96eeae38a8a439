"""CT-style intensity preprocessing and multi-scale patch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, ShapeError
from .volume import LabelMask, Volume

HU_MIN = -200.0
HU_MAX = 700.0
TARGET_SPACING = (3.0, 1.0, 1.0)
BODY_THRESHOLD_HU = -150.0
LOCAL_Z_FRACTION = 0.4
SCALES = ("local", "middle", "global")


def truncate_hu(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    return Volume(np.clip(v.data, lo, hi), v.spacing)


def normalize(v: Volume) -> Volume:
    """Zero-mean, unit-std intensities using this image's own statistics."""
    d = v.data.astype(np.float64)
    mean = d.mean()
    std = d.std()
    if not std > 0:
        raise DegenerateInputError("normalize: volume is constant (zero standard deviation)")
    return Volume(((d - mean) / std).astype(np.float32), v.spacing)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resampled_shape(shape, spacing, target_spacing=TARGET_SPACING) -> tuple[int, int, int]:
    return tuple(_round_half_up(n * s / t) for n, s, t in zip(shape, spacing, target_spacing))


def resample(v, target_spacing=TARGET_SPACING, out_shape=None):
    """Resample a Volume (trilinear) or LabelMask (nearest) to ``target_spacing``.

    Output voxel ``i`` samples input coordinate ``i * target / spacing`` per
    axis, so the first voxel centres coincide. ``out_shape`` overrides the
    computed dimensions (used to map predictions back onto an original grid).
    """
    target = tuple(float(t) for t in target_spacing)
    if out_shape is None:
        out_shape = resampled_shape(v.shape, v.spacing, target)
    out_shape = tuple(int(n) for n in out_shape)
    if min(out_shape) < 1:
        raise ShapeError(f"resample: target spacing {target} leaves an empty axis {out_shape}")
    is_mask = isinstance(v, LabelMask)
    if out_shape == v.shape and target == v.spacing:
        return LabelMask(v.data.copy(), target) if is_mask else Volume(v.data.copy(), target)

    ratios = [t / s for t, s in zip(target, v.spacing)]
    grids = np.meshgrid(*[np.arange(n) * r for n, r in zip(out_shape, ratios)], indexing="ij", sparse=True)
    coords = np.broadcast_arrays(*grids)
    if is_mask:
        data = ndimage.map_coordinates(v.data, coords, order=0, mode="nearest")
        return LabelMask(data.astype(np.uint8), target)
    data = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(data.astype(np.float32), target)


def preprocess(v: Volume, target_spacing=TARGET_SPACING) -> Volume:
    """Truncate to [-200, 700] HU, normalise, resample: the fixed inference recipe."""
    return resample(normalize(truncate_hu(v)), target_spacing)


# --------------------------------------------------------------------------
# sampling regions


@dataclass(frozen=True)
class RegionBox:
    """Inclusive voxel bounds ``z0..z1, y0..y1, x0..x1``."""

    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int
    scale: str = "global"

    def __post_init__(self):
        if self.z1 < self.z0 or self.y1 < self.y0 or self.x1 < self.x0:
            raise ValueError(f"empty region box {self.bounds}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")

    @property
    def bounds(self) -> tuple[int, int, int, int, int, int]:
        return (self.z0, self.z1, self.y0, self.y1, self.x0, self.x1)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return (slice(self.z0, self.z1 + 1), slice(self.y0, self.y1 + 1), slice(self.x0, self.x1 + 1))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.z1 - self.z0 + 1, self.y1 - self.y0 + 1, self.x1 - self.x0 + 1)

    def within(self, other: "RegionBox") -> bool:
        return (other.z0 <= self.z0 and self.z1 <= other.z1 and other.y0 <= self.y0
                and self.y1 <= other.y1 and other.x0 <= self.x0 and self.x1 <= other.x1)

    def fits(self, shape) -> bool:
        return self.z1 < shape[0] and self.y1 < shape[1] and self.x1 < shape[2] and min(self.z0, self.y0, self.x0) >= 0


def _bbox(mask: np.ndarray) -> tuple[int, ...]:
    out = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        out += [int(idx[0]), int(idx[-1])]
    return tuple(out)


def compute_region(v: Volume, scale: str) -> RegionBox:
    """Sampling region for ``scale`` from an HU (not yet normalised) volume.

    ``global`` is the whole grid; ``middle`` the tight box around body voxels
    (HU > -150); ``local`` keeps the first 40% of the body's slices (lowest z
    indices, the cranial end) and re-tightens y/x to the body in those slices.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {', '.join(SCALES)}; got {scale!r}")
    D, H, W = v.shape
    if scale == "global":
        return RegionBox(0, D - 1, 0, H - 1, 0, W - 1, "global")
    body = v.data > BODY_THRESHOLD_HU
    if not body.any():
        raise DegenerateInputError("compute_region: no body voxels above -150 HU")
    z0, z1, y0, y1, x0, x1 = _bbox(body)
    if scale == "middle":
        return RegionBox(z0, z1, y0, y1, x0, x1, "middle")
    nz = z1 - z0 + 1
    keep = max(1, _round_half_up(LOCAL_Z_FRACTION * nz))
    lz1 = z0 + keep - 1
    sub = np.zeros_like(body)
    sub[z0:lz1 + 1] = body[z0:lz1 + 1]
    _, _, ly0, ly1, lx0, lx1 = _bbox(sub)
    return RegionBox(z0, lz1, ly0, ly1, lx0, lx1, "local")


# --------------------------------------------------------------------------
# patch sampling


@dataclass
class PatchSample:
    image: np.ndarray
    label: np.ndarray
    scale: str
    corner: tuple[int, int, int] = (0, 0, 0)
    foreground_centered: bool = False
    fallback_uniform: bool = False
    flipped: bool = False
    meta: dict = field(default_factory=dict)


def _corner_range(a: int, b: int, n: int, p: int) -> tuple[int, int]:
    """Allowed patch-start range along one axis for box ``[a, b]`` in a grid of ``n >= p``."""
    lo, hi = a, b - p + 1
    if hi < lo:
        # box narrower than the patch: any start whose patch covers the box
        lo, hi = max(0, b - p + 1), min(a, n - p)
    return lo, hi


def sample_patch(
    v,
    m,
    box: RegionBox,
    rng: np.random.Generator,
    patch_shape=(16, 64, 64),
    fg_prob: float = 0.5,
    flip_prob: float = 0.5,
) -> PatchSample:
    """Random crop inside ``box``, foreground-biased, with a random left-right flip.

    With probability ``fg_prob`` the patch is centred on a GTV voxel drawn
    uniformly (from those inside the box when there are any); otherwise its
    start corner is uniform over the box. Grids smaller than the patch are
    padded at the far end with the image minimum (label 0).
    """
    img = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    lab = m.data if isinstance(m, LabelMask) else np.asarray(m, dtype=np.uint8)
    if img.shape != lab.shape:
        raise ShapeError(f"sample_patch: image {img.shape} and mask {lab.shape} differ")
    if not box.fits(img.shape):
        raise ShapeError(f"sample_patch: box {box.bounds} exceeds volume {img.shape}")
    p = tuple(int(s) for s in patch_shape)
    pad = [max(0, ps - n) for ps, n in zip(p, img.shape)]
    if any(pad):
        widths = [(0, q) for q in pad]
        img = np.pad(img, widths, constant_values=img.min())
        lab = np.pad(lab, widths, constant_values=0)
    shape = img.shape
    ranges = [
        _corner_range(a, b, n, ps)
        for (a, b), n, ps in zip(((box.z0, box.z1), (box.y0, box.y1), (box.x0, box.x1)), shape, p)
    ]

    centered = fallback = False
    if rng.random() < fg_prob:
        fg = np.argwhere(lab[box.slices])
        if len(fg):
            fg = fg + np.array([box.z0, box.y0, box.x0])
        else:
            fg = np.argwhere(lab)
        if len(fg):
            c = fg[rng.integers(len(fg))]
            corner = tuple(
                int(np.clip(ci - ps // 2, lo, hi)) for ci, ps, (lo, hi) in zip(c, p, ranges)
            )
            centered = True
        else:
            fallback = True
    if not centered:
        corner = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in ranges)

    sl = tuple(slice(c, c + ps) for c, ps in zip(corner, p))
    pi = img[sl].copy()
    pl = lab[sl].copy()
    flipped = bool(rng.random() < flip_prob)
    if flipped:
        pi = pi[:, :, ::-1].copy()
        pl = pl[:, :, ::-1].copy()
    return PatchSample(pi, pl, box.scale, corner, centered, fallback, flipped)


def flip_lr(a: np.ndarray) -> np.ndarray:
    """In-plane left-right flip (last axis)."""
    return a[..., ::-1].copy()
