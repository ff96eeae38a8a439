"""2.5D U-Net with in-plane spatial attention and Project & Excite blocks.

Topology for ``L`` levels (default 4)::

    enc1 -> pool -> pe,enc2 -> pool -> pe,enc3 -> pool -> pe,enc4
         -> am,pe,bottom (3x3x3 kernels)
         -> [bottom ++ enc4] am,pe,dec1
         -> up2 -> [.. ++ enc3] am,pe,dec2
         -> up3 -> [.. ++ enc2] am,pe,dec3
         -> up4 -> [.. ++ enc1] am,pe,dec4 -> head (1x1x1) -> softmax

Pooling and upsampling act in-plane only (1x2x2), so the slice count is
kept at every level. ``kernel_mode="iso_3d"`` swaps every 1x3x3 kernel for
3x3x3 and changes nothing else.

Parameters live in a flat name -> Tensor map; names encode the block they
belong to (``dec2.am.conv1.weight``, ``enc3.pe.fc2.bias`` ...), which is what
architecture introspection keys off.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ShapeError

KERNEL_MODES = ("aniso_2p5d", "iso_3d")
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: tuple[int, ...] = (16, 32, 64, 128)
    levels: int = 4
    pe_reduction: int = 2
    kernel_mode: str = "aniso_2p5d"
    in_channels: int = 1
    out_classes: int = 2
    patch_shape: tuple[int, int, int] = (16, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        if len(self.base_channels) != self.levels:
            raise ValueError(
                f"base_channels has {len(self.base_channels)} entries but levels={self.levels}"
            )
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}, got {self.kernel_mode!r}")
        if self.pe_reduction < 1:
            raise ValueError("pe_reduction must be a positive integer")
        for c in self.base_channels:
            if c <= 0 or c % 2 or c % self.pe_reduction:
                raise ValueError(
                    f"channel count {c} must be positive, even and divisible by pe_reduction={self.pe_reduction}"
                )
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ValueError(f"patch_shape must be three positive ints, got {self.patch_shape}")
        if self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("in_channels must be >= 1 and out_classes >= 2")

    @property
    def downsamplings(self) -> int:
        return self.levels - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class NetworkParams:
    """All tensors of one network instance, learnable weights and BN buffers alike."""

    config: NetworkConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if is_trainable(k)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def parameter_count(self) -> int:
        return int(np.sum([t.size for k, t in self.tensors.items() if is_trainable(k)]))

    def astype(self, dtype) -> "NetworkParams":
        """Copy with every tensor cast to ``dtype`` (float64 for gradient checks)."""
        out = NetworkParams(self.config)
        for k, t in self.tensors.items():
            out.tensors[k] = Tensor(np.array(t.data, dtype=dtype), requires_grad=t.requires_grad, name=k)
        return out


def is_trainable(name: str) -> bool:
    return not name.endswith(_BUFFER_SUFFIXES)


# --------------------------------------------------------------------------
# layout


def _kernel(config: NetworkConfig, bottom: bool = False) -> tuple[int, int, int]:
    if bottom or config.kernel_mode == "iso_3d":
        return (3, 3, 3)
    return (1, 3, 3)


def block_layout(config: NetworkConfig) -> list[dict]:
    """Ordered description of every block: name, kind, level, channels, attention modules.

    ``kind`` is ``encoder``, ``bottom`` or ``decoder``; ``downsample`` marks a
    1x2x2 max-pool in front of the block, ``upsample`` a transposed conv.
    """
    ch = config.base_channels
    L = config.levels
    blocks = []
    for i in range(L):
        blocks.append(dict(
            name=f"enc{i + 1}", kind="encoder", level=i,
            cin=config.in_channels if i == 0 else ch[i - 1], cout=ch[i],
            pe=i > 0, am=False, downsample=i > 0, upsample=False, kernel=_kernel(config),
        ))
    blocks.append(dict(
        name="bottom", kind="bottom", level=L - 1, cin=ch[-1], cout=ch[-1],
        pe=True, am=True, downsample=False, upsample=False, kernel=_kernel(config, bottom=True),
    ))
    for j in range(L):
        level = L - 1 - j
        if j == 0:
            cin = ch[-1] + ch[-1]
        else:
            cin = ch[level] + ch[level]  # upsampled previous decoder output ++ skip
        blocks.append(dict(
            name=f"dec{j + 1}", kind="decoder", level=level, cin=cin, cout=ch[level],
            pe=True, am=True, downsample=False, upsample=j > 0, kernel=_kernel(config),
        ))
    return blocks


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of the network, in construction order."""
    shapes: dict[str, tuple[int, ...]] = {}
    ch = config.base_channels
    d = config.pe_reduction
    for blk in block_layout(config):
        name, cin, cout = blk["name"], blk["cin"], blk["cout"]
        if blk["upsample"]:
            src = ch[blk["level"] + 1]
            shapes[f"{name}.up.weight"] = (src, ch[blk["level"]], 1, 2, 2)
            shapes[f"{name}.up.bias"] = (ch[blk["level"]],)
        if blk["am"]:
            ak = _kernel(config)
            shapes[f"{name}.am.conv1.weight"] = (cin // 2, cin) + ak
            shapes[f"{name}.am.conv1.bias"] = (cin // 2,)
            shapes[f"{name}.am.conv2.weight"] = (1, cin // 2) + ak
            shapes[f"{name}.am.conv2.bias"] = (1,)
        if blk["pe"]:
            if cin % d:
                raise ShapeError(f"{name}: PE input channels {cin} not divisible by reduction {d}")
            shapes[f"{name}.pe.fc1.weight"] = (cin // d, cin, 1, 1, 1)
            shapes[f"{name}.pe.fc1.bias"] = (cin // d,)
            shapes[f"{name}.pe.fc2.weight"] = (cin, cin // d, 1, 1, 1)
            shapes[f"{name}.pe.fc2.bias"] = (cin,)
        k = blk["kernel"]
        for layer, lin in (("1", cin), ("2", cout)):
            shapes[f"{name}.conv{layer}.weight"] = (cout, lin) + k
            shapes[f"{name}.conv{layer}.bias"] = (cout,)
            shapes[f"{name}.bn{layer}.gamma"] = (cout,)
            shapes[f"{name}.bn{layer}.beta"] = (cout,)
            shapes[f"{name}.bn{layer}.running_mean"] = (cout,)
            shapes[f"{name}.bn{layer}.running_var"] = (cout,)
    shapes["head.weight"] = (config.out_classes, ch[0], 1, 1, 1)
    shapes["head.bias"] = (config.out_classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".up.weight"):
        # each output voxel of the 1x2x2/stride-2 transposed conv sees Cin taps
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """He-normal weights, zero biases, identity batch-norm; deterministic in ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    params = NetworkParams(config)
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / _fan_in(name, shape))
            data = rng.standard_normal(shape) * std
        elif name.endswith((".gamma", ".running_var")):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.tensors[name] = Tensor(data.astype(np.float32), requires_grad=is_trainable(name), name=name)
    return params


# --------------------------------------------------------------------------
# blocks


def conv_block(x: Tensor, params: NetworkParams, prefix: str, training: bool = True) -> Tensor:
    """(conv -> BN -> leaky ReLU) twice."""
    for layer in ("1", "2"):
        w = params[f"{prefix}.conv{layer}.weight"]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"{prefix}.conv{layer}: input has {x.shape[1]} channels, layer expects {w.shape[1]}")
        x = ops.conv3d(x, w, params[f"{prefix}.conv{layer}.bias"])
        x = ops.batch_norm(
            x,
            params[f"{prefix}.bn{layer}.gamma"],
            params[f"{prefix}.bn{layer}.beta"],
            params[f"{prefix}.bn{layer}.running_mean"],
            params[f"{prefix}.bn{layer}.running_var"],
            training,
        )
        x = ops.activation(x, "leaky_relu")
    return x


def attention_module(x: Tensor, params: NetworkParams, prefix: str) -> tuple[Tensor, Tensor]:
    """Spatial attention: out = x + x * alpha, alpha = sigmoid(conv(relu(conv(x)))).

    Returns ``(out, alpha)`` with ``alpha`` of shape ``(B, 1, D, H, W)``.
    """
    C = x.shape[1]
    if C % 2:
        raise ShapeError(f"{prefix}: attention needs an even channel count, got {C}")
    h = ops.conv3d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    h = ops.activation(h, "relu")
    h = ops.conv3d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])
    alpha = ops.activation(h, "sigmoid")
    gated = ops.mul(x, ops.broadcast_to(alpha, x.shape))
    return ops.add(x, gated), alpha


def pe_block(x: Tensor, params: NetworkParams, prefix: str, return_gate: bool = False):
    """Project & Excite channel recalibration.

    The three axis-wise average projections are expanded back to the input
    shape and summed; two 1x1x1 convolutions (ReLU, then sigmoid) turn that
    sum into a voxel- and channel-wise gate that multiplies ``x``.
    """
    C = x.shape[1]
    d = params.config.pe_reduction
    if C % d:
        raise ShapeError(f"{prefix}: channel count {C} not divisible by PE reduction {d}")
    w1 = params[f"{prefix}.fc1.weight"]
    if w1.shape[1] != C:
        raise ShapeError(f"{prefix}: PE expects {w1.shape[1]} input channels, got {C}")
    z = None
    for axis in ("D", "H", "W"):
        proj = ops.broadcast_to(ops.pool_mean_axes(x, axis), x.shape)
        z = proj if z is None else ops.add(z, proj)
    h = ops.activation(ops.conv3d(z, w1, params[f"{prefix}.fc1.bias"]), "relu")
    gate = ops.activation(ops.conv3d(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]), "sigmoid")
    out = ops.mul(x, gate)
    return (out, gate) if return_gate else out


def _pre_block(x: Tensor, params: NetworkParams, blk: dict, maps: list | None) -> Tensor:
    name = blk["name"]
    if blk["am"]:
        x, alpha = attention_module(x, params, f"{name}.am")
        if maps is not None:
            maps.append((name, alpha))
    if blk["pe"]:
        x = pe_block(x, params, f"{name}.pe")
    return x


def unet_forward(
    x: Tensor,
    params: NetworkParams,
    config: NetworkConfig | None = None,
    mode: str = "train",
    attention_maps: list | None = None,
    check_patch_shape: bool = False,
) -> Tensor:
    """Class probabilities ``(B, out_classes, D, H, W)`` for an input ``(B, C, D, H, W)``.

    ``mode`` is ``"train"`` (batch statistics, running stats updated) or
    ``"eval"``. Pass a list as ``attention_maps`` to collect
    ``(block_name, alpha)`` pairs.
    """
    config = config or params.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if x.ndim != 5 or x.shape[1] != config.in_channels:
        raise ShapeError(f"unet_forward: expected (B, {config.in_channels}, D, H, W), got {x.shape}")
    factor = 2 ** config.downsamplings
    H, W = x.shape[3], x.shape[4]
    if H % factor or W % factor:
        raise ShapeError(f"unet_forward: H={H} and W={W} must be divisible by {factor}")
    if check_patch_shape and tuple(x.shape[2:]) != config.patch_shape:
        raise ShapeError(f"unet_forward: spatial shape {x.shape[2:]} != patch_shape {config.patch_shape}")

    layout = block_layout(config)
    skips: list[Tensor] = []
    h = x
    for blk in layout:
        kind = blk["kind"]
        if kind == "encoder":
            if blk["downsample"]:
                h = ops.max_pool_inplane(h)
            h = _pre_block(h, params, blk, attention_maps)
            h = conv_block(h, params, blk["name"], training)
            skips.append(h)
        elif kind == "bottom":
            h = _pre_block(h, params, blk, attention_maps)
            h = conv_block(h, params, blk["name"], training)
        else:
            name = blk["name"]
            if blk["upsample"]:
                h = ops.conv_transpose_inplane(h, params[f"{name}.up.weight"], params[f"{name}.up.bias"])
            h = ops.concat_channels(h, skips[blk["level"]])
            h = _pre_block(h, params, blk, attention_maps)
            h = conv_block(h, params, name, training)
    logits = ops.conv3d(h, params["head.weight"], params["head.bias"])
    return ops.softmax_channels(logits)


def architecture_summary(params: NetworkParams) -> dict:
    """Counts recovered purely from parameter names and shapes."""
    names = list(params.tensors)
    blocks = sorted({n.split(".")[0] for n in names if ".conv1.weight" in n and ".am." not in n})
    pe = sorted({n.split(".")[0] for n in names if ".pe.fc1.weight" in n})
    am = sorted({n.split(".")[0] for n in names if ".am.conv1.weight" in n})
    ups = sorted({n.split(".")[0] for n in names if n.endswith(".up.weight")})
    iso = sorted({
        n.split(".")[0] for n in names
        if n.endswith(".weight") and params[n].ndim == 5 and params[n].shape[2:] == (3, 3, 3)
    })
    return dict(
        conv_blocks=blocks, pe_blocks=pe, attention_modules=am,
        upsamplings=ups, downsamplings=len(ups), blocks_with_3x3x3=iso,
    )
