"""Synthetic anisotropic head-and-neck CT phantoms with a known GTV.

Axis 0 runs cranio-caudally: slice 0 is the top of the head, the neck and a
wide shoulder slab follow at higher slice indices. The GTV is a small
ellipsoid of slightly (or, in the separable variant, strongly) elevated HU
inside the head's soft tissue.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMask, Volume

AIR_HU = -200.0
SOFT_TISSUE_HU = 40.0
BONE_HU = 700.0
DELTA_LOW_CONTRAST = 25.0
DELTA_SEPARABLE = 200.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 128, 128)
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)
    soft_tissue_hu: float = SOFT_TISSUE_HU
    bone_hu: float = BONE_HU
    air_hu: float = AIR_HU
    gtv_delta_hu: float = DELTA_LOW_CONTRAST
    noise_sigma: float = 10.0
    gtv_radius_inplane: tuple[float, float] = (4.0, 10.0)
    gtv_radius_z: tuple[float, float] = (3.0, 5.0)
    # explicit GTV geometry; drawn from the seed when left as None
    gtv_center: tuple[float, float, float] | None = None
    gtv_radii: tuple[float, float, float] | None = None
    skull_thickness: float = 0.12
    seed: int = 0

    @classmethod
    def separable(cls, **kw) -> "PhantomSpec":
        return cls(gtv_delta_hu=DELTA_SEPARABLE, **kw)


@dataclass(frozen=True)
class PhantomGeometry:
    head_center: tuple[float, float, float]
    head_radii: tuple[float, float, float]
    gtv_center: tuple[float, float, float]
    gtv_radii: tuple[float, float, float]
    neck: tuple[int, int]
    shoulders: tuple[int, int]


def _ellipsoid(shape, center, radii) -> np.ndarray:
    z, y, x = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r2 = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    return r2


def phantom_geometry(spec: PhantomSpec, rng: np.random.Generator | None = None) -> PhantomGeometry:
    D, H, W = spec.dims
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    jitter = rng.uniform(-1, 1, size=5)
    head_c = (0.30 * D, H / 2 + 2.0 * jitter[0], W / 2 + 2.0 * jitter[1])
    head_r = (0.24 * D, 0.34 * H * (1 + 0.04 * jitter[2]), 0.30 * W * (1 + 0.04 * jitter[3]))
    neck = (int(round(head_c[0])), int(round(0.78 * D)))
    shoulders = (int(round(0.78 * D)), int(round(0.95 * D)))

    inner = 1.0 - spec.skull_thickness
    if spec.gtv_radii is None:
        rxy = rng.uniform(*spec.gtv_radius_inplane, size=2)
        rz = rng.uniform(*spec.gtv_radius_z)
        radii = (float(rz), float(rxy[0]), float(rxy[1]))
    else:
        radii = tuple(float(r) for r in spec.gtv_radii)
    # margin left inside the inner (non-bone) head ellipsoid, per axis, in voxels
    room = [inner * hr - r - 1.0 for hr, r in zip(head_r, radii)]
    if spec.gtv_center is None:
        if min(room) <= 0:
            raise ValueError(f"GTV radii {radii} too large for head radii {head_r}")
        u = rng.uniform(-1, 1, size=3)
        # keep the centre in the cranial part of the body and well inside the head
        center = tuple(hc + 0.35 * ri * ui for hc, ri, ui in zip(head_c, room, u))
    else:
        center = tuple(float(c) for c in spec.gtv_center)
    # GTV's farthest points must stay inside the soft-tissue part of the head
    n = 48
    t = np.linspace(0, np.pi, n)[:, None]
    ph = np.linspace(0, 2 * np.pi, 2 * n)[None, :]
    pts = np.stack([
        center[0] + radii[0] * np.cos(t) * np.ones_like(ph),
        center[1] + radii[1] * np.sin(t) * np.cos(ph),
        center[2] + radii[2] * np.sin(t) * np.sin(ph),
    ], axis=-1).reshape(-1, 3)
    rr = (((pts - np.array(head_c)) / (np.array(head_r) * inner)) ** 2).sum(axis=1)
    if rr.max() >= 1.0 or min(room) <= 0:
        raise ValueError(f"GTV radii {radii} at {center} do not fit inside the head")
    return PhantomGeometry(head_c, head_r, center, radii, neck, shoulders)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMask]:
    """HU volume and exact GTV mask; a pure function of ``spec``."""
    D, H, W = spec.dims
    if min(spec.dims) < 8:
        raise ValueError(f"phantom dims too small: {spec.dims}")
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed) & (2**64 - 1)))
    geo = phantom_geometry(spec, rng)

    vol = np.full(spec.dims, spec.air_hu, dtype=np.float64)
    r2 = _ellipsoid(spec.dims, geo.head_center, geo.head_radii)
    head = r2 <= 1.0
    inner = 1.0 - spec.skull_thickness
    skull = head & (r2 > inner**2)

    z = np.arange(D)[:, None, None]
    y = np.arange(H)[None, :, None]
    x = np.arange(W)[None, None, :]
    cy, cx = geo.head_center[1], geo.head_center[2]
    neck = ((z >= geo.neck[0]) & (z < geo.neck[1])
            & (((y - cy) / (0.17 * H)) ** 2 + ((x - cx) / (0.16 * W)) ** 2 <= 1.0))
    shoulders = ((z >= geo.shoulders[0]) & (z <= geo.shoulders[1])
                 & (np.abs(y - cy) <= 0.20 * H) & (np.abs(x - cx) <= 0.45 * W))

    vol[neck | shoulders | head] = spec.soft_tissue_hu
    vol[skull] = spec.bone_hu
    gtv = _ellipsoid(spec.dims, geo.gtv_center, geo.gtv_radii) <= 1.0
    vol[gtv] = spec.soft_tissue_hu + spec.gtv_delta_hu
    vol += rng.normal(0.0, spec.noise_sigma, size=spec.dims)

    return Volume(vol.astype(np.float32), spec.spacing), LabelMask(gtv.astype(np.uint8), spec.spacing)


def case_spec(seed: int, index: int, separable: bool = False, **kw) -> PhantomSpec:
    """Per-case spec for batch generation: the case seed mixes ``seed`` and ``index``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])
    case_seed = int(ss.generate_state(1, dtype=np.uint64)[0])
    spec = PhantomSpec.separable(seed=case_seed, **kw) if separable else PhantomSpec(seed=case_seed, **kw)
    return spec

