"""Soft-Dice training of one network with Adam and step learning-rate decay."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import GradTape, Tensor, backward, record
from .errors import NonFiniteError, ShapeError
from .nn import NetworkConfig, NetworkParams, init_params, unet_forward
from .preprocess import SCALES, compute_region, normalize, resample, sample_patch, truncate_hu, TARGET_SPACING
from .volume import LabelMask, Volume

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimisation settings.

    Rate, decay and weight decay follow the published protocol; batch size
    and iteration count default to desk-scale values (the published batch
    size is 16).
    """

    lr0: float = 1e-4
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 10000
    weight_decay: float = 1e-5
    batch_size: int = 4
    total_iterations: int = 2000
    seed: int = 0
    scale: str = "local"
    fg_prob: float = 0.5
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {', '.join(SCALES)}; got {self.scale!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not (self.lr0 > 0 and self.lr_decay_factor > 0 and self.lr_decay_every > 0):
            raise ValueError("lr0, lr_decay_factor and lr_decay_every must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


# --------------------------------------------------------------------------
# loss


def dice_loss(probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps) over the whole batch.

    ``p`` is the foreground channel of ``probs`` (B, 2, D, H, W); ``target``
    is a binary array (B, D, H, W) or (B, 1, D, H, W).
    """
    g = np.asarray(target.data if isinstance(target, Tensor) else target)
    if probs.ndim != 5 or probs.shape[1] < 2:
        raise ShapeError(f"dice_loss: probs must be (B, C>=2, D, H, W), got {probs.shape}")
    if g.ndim == 4:
        g = g[:, None]
    if g.shape != (probs.shape[0], 1) + probs.shape[2:]:
        raise ShapeError(f"dice_loss: target shape {g.shape} does not match probs {probs.shape}")
    dtype = probs.dtype
    p = probs.data[:, 1:2].astype(np.float64)
    gf = g.astype(np.float64)
    inter = float((p * gf).sum())
    denom = float((p * p).sum() + (gf * gf).sum()) + eps
    numer = 2.0 * inter + eps
    out = Tensor(np.asarray(1.0 - numer / denom, dtype=dtype))

    def bw(go):
        dp = -(2.0 * gf * denom - numer * 2.0 * p) / (denom * denom)
        grad = np.zeros(probs.shape, dtype=dtype)
        grad[:, 1:2] = (dp * float(go)).astype(dtype)
        return (grad,)

    return record(out, (probs,), bw)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params) -> "AdamState":
        tensors = params.trainable() if isinstance(params, NetworkParams) else params
        return cls(
            {k: np.zeros_like(t.data) for k, t in tensors.items()},
            {k: np.zeros_like(t.data) for k, t in tensors.items()},
            0,
        )


def adam_step(params, state: AdamState, lr: float, weight_decay: float = 0.0, grads=None) -> None:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    ``grads`` defaults to each tensor's ``.grad`` (missing grads count as
    zero). A non-finite gradient aborts the step before anything changes.
    """
    tensors = params.trainable() if isinstance(params, NetworkParams) else params
    if grads is None:
        grads = {k: t.grad for k, t in tensors.items()}
    bad = [k for k, g in grads.items() if g is not None and not np.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"adam_step rejected: non-finite gradient in {', '.join(bad[:5])}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for k, p in tensors.items():
        g = grads.get(k)
        g = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.setdefault(k, np.zeros_like(p.data))
        v = state.v.setdefault(k, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)).astype(p.data.dtype)


def lr_schedule(iteration: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


# --------------------------------------------------------------------------
# loop


@dataclass
class PreparedCase:
    image: np.ndarray
    label: np.ndarray
    box: object


def prepare_case(v: Volume, m: LabelMask, scale: str) -> PreparedCase:
    """Truncate, normalise and resample a training pair; compute its sampling box."""
    if v.shape != m.shape:
        raise ShapeError(f"volume {v.shape} and mask {m.shape} differ")
    hu = resample(truncate_hu(v), TARGET_SPACING)
    img = resample(normalize(truncate_hu(v)), TARGET_SPACING)
    lab = resample(m, TARGET_SPACING, out_shape=img.shape)
    return PreparedCase(img.data, lab.data, compute_region(hu, scale))


@dataclass
class TrainResult:
    params: NetworkParams
    log: list[tuple[int, float, float]]
    state: AdamState


def train(
    dataset: Sequence[tuple[Volume, LabelMask]],
    tcfg: TrainConfig,
    ncfg: NetworkConfig,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Sample, forward, Dice loss, backward, Adam; ``tcfg.total_iterations`` times.

    Deterministic for a fixed ``tcfg.seed``: the initial weights and the
    patch sampler draw from independent streams spawned from that seed.
    """
    init_seq, sample_seq = np.random.SeedSequence(int(tcfg.seed) & (2**64 - 1)).spawn(2)
    params = init_params(ncfg, int(init_seq.generate_state(1, dtype=np.uint64)[0]))
    state = AdamState.create(params)
    rows: list[tuple[int, float, float]] = []
    if tcfg.total_iterations == 0:
        return TrainResult(params, rows, state)
    if not dataset:
        raise ValueError("train: empty dataset")
    cases = [prepare_case(v, m, tcfg.scale) for v, m in dataset]
    rng = np.random.default_rng(sample_seq)

    for it in range(tcfg.total_iterations):
        lr = lr_schedule(it, tcfg)
        imgs, labs = [], []
        for _ in range(tcfg.batch_size):
            c = cases[int(rng.integers(len(cases)))]
            s = sample_patch(c.image, c.label, c.box, rng, ncfg.patch_shape, tcfg.fg_prob, tcfg.flip_prob)
            imgs.append(s.image)
            labs.append(s.label)
        x = Tensor(np.stack(imgs)[:, None])
        g = np.stack(labs)
        params.zero_grad()
        with GradTape() as tape:
            probs = unet_forward(x, params, ncfg, mode="train")
            loss = dice_loss(probs, g)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(it, value)
        backward(loss, tape)
        adam_step(params, state, lr, tcfg.weight_decay)
        rows.append((it, lr, value))
        if progress is not None:
            progress(it, lr, value)
    return TrainResult(params, rows, state)


def format_loss_log(rows) -> str:
    return "".join(f"{it}\t{lr!r}\t{loss!r}\n" for it, lr, loss in rows)


def parse_loss_log(text: str) -> list[tuple[int, float, float]]:
    out = []
    for line in text.splitlines():
        it, lr, loss = line.split("\t")
        out.append((int(it), float(lr), float(loss)))
    return out
