"""On-disk formats: ``gtvvol1`` volumes/masks and ``gtvckpt1`` checkpoints.

Volume file::

    gtvvol1 <f32|u8> <D> <H> <W> <sz> <sy> <sx>\\n
    <D*H*W little-endian elements, z-major>

Checkpoint file::

    b"gtvckpt1\\n"
    u32 config_len, config_len bytes of UTF-8 JSON
    u32 tensor_count
    per tensor: u32 name_len, name, u32 rank, rank x u32 dims, f32 payload

All integers are little-endian.
"""
from __future__ import annotations

import json
import os
import re
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import FormatError, ShapeError, TruncatedPayloadError, UnsupportedVersionError
from .nn import NetworkConfig, NetworkParams, is_trainable, param_shapes
from .volume import LabelMask, Volume

VOLUME_TAG = "gtvvol1"
CKPT_MAGIC = b"gtvckpt1\n"
_MAX_HEADER = 512
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _fmt_float(v: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(v))


def encode_volume(v: Volume | LabelMask) -> bytes:
    if isinstance(v, LabelMask):
        code, arr = "u8", v.data.astype("u1", copy=False)
    elif isinstance(v, Volume):
        code, arr = "f32", v.data.astype("<f4", copy=False)
    else:
        raise TypeError(f"expected Volume or LabelMask, got {type(v).__name__}")
    D, H, W = arr.shape
    header = " ".join([VOLUME_TAG, code, str(D), str(H), str(W)] + [_fmt_float(s) for s in v.spacing]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode_volume(buf: bytes) -> Volume | LabelMask:
    nl = buf.find(b"\n", 0, _MAX_HEADER)
    if nl < 0:
        raise FormatError("volume header: no newline within the first 512 bytes")
    try:
        header = buf[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("volume header is not ASCII") from exc
    fields = header.split(" ")
    if not fields or not fields[0].startswith("gtvvol"):
        raise FormatError(f"volume header: bad tag {fields[0][:16]!r}")
    if fields[0] != VOLUME_TAG:
        raise UnsupportedVersionError(f"volume header: unsupported version {fields[0]!r} (expected {VOLUME_TAG})")
    if len(fields) != 8:
        raise FormatError(f"volume header: expected 8 fields, got {len(fields)}")
    code = fields[1]
    if code not in _DTYPES:
        raise FormatError(f"volume header: unknown dtype {code!r}")
    try:
        D, H, W = (int(f) for f in fields[2:5])
        spacing = tuple(float(f) for f in fields[5:8])
    except ValueError as exc:
        raise FormatError(f"volume header: malformed numeric field in {header!r}") from exc
    if min(D, H, W) < 1 or not all(s > 0 for s in spacing):
        raise FormatError(f"volume header: non-positive dims or spacing in {header!r}")
    dt = _DTYPES[code]
    expected = D * H * W * dt.itemsize
    payload = memoryview(buf)[nl + 1:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"volume payload truncated: expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"volume payload too long: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(D, H, W).copy()
    if code == "u8":
        return LabelMask(arr, spacing)
    return Volume(arr.astype(np.float32, copy=False), spacing)


def write_volume(path, v: Volume | LabelMask) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path) -> Volume | LabelMask:
    return decode_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params: NetworkParams, extra: dict | None = None) -> bytes:
    blob = {"network": params.config.to_dict()}
    if extra:
        blob["meta"] = extra
    cfg = json.dumps(blob, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"checkpoint truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes, config: NetworkConfig | None = None) -> tuple[NetworkParams, dict]:
    """Parse a checkpoint; with ``config`` given, also check it matches tensor by tensor."""
    if not buf.startswith(CKPT_MAGIC):
        if buf.startswith(b"gtvckpt"):
            raise UnsupportedVersionError(f"checkpoint: unsupported version {bytes(buf[:9])!r}")
        raise FormatError("checkpoint: bad magic bytes")
    r = _Reader(buf)
    r.take(len(CKPT_MAGIC), "magic")
    n = r.u32("config length")
    try:
        blob = json.loads(bytes(r.take(n, "config")).decode("utf-8"))
        stored = NetworkConfig.from_dict(blob["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint: unreadable config blob ({exc})") from exc
    count = r.u32("tensor count")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name = bytes(r.take(r.u32("name length"), "name")).decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}")) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"payload of {name}"), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=is_trainable(name), name=name)
    if r.pos != len(r.buf):
        raise FormatError(f"checkpoint: {len(r.buf) - r.pos} trailing bytes")

    target = config if config is not None else stored
    expected = param_shapes(target)
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint: tensor {name!r} missing for the requested config")
        if tensors[name].shape != tuple(shape):
            raise ShapeError(
                f"checkpoint: tensor {name!r} has shape {tensors[name].shape}, config expects {tuple(shape)}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ShapeError(f"checkpoint: unexpected tensor {extra[0]!r} for the requested config")
    params = NetworkParams(target, {k: tensors[k] for k in expected})
    return params, blob.get("meta", {})


def save_checkpoint(path, params: NetworkParams, extra: dict | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(params, extra))
    os.replace(tmp, path)


def load_checkpoint(path, config: NetworkConfig | None = None) -> tuple[NetworkParams, dict]:
    return decode_checkpoint(Path(path).read_bytes(), config)


# --------------------------------------------------------------------------
# case directories

_CASE_RE = re.compile(r"^case_(\d+)_(img|msk)\.gtvvol$")


def case_paths(directory, index: int) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"case_{index}_img.gtvvol", d / f"case_{index}_msk.gtvvol"


def list_cases(directory) -> dict[int, tuple[Path | None, Path | None]]:
    """Index -> (image path, mask path) for ``case_<i>_{img,msk}.gtvvol`` files; missing halves are None."""
    found: dict[int, list] = {}
    for p in Path(directory).iterdir():
        m = _CASE_RE.match(p.name)
        if m:
            slot = found.setdefault(int(m.group(1)), [None, None])
            slot[0 if m.group(2) == "img" else 1] = p
    return {k: tuple(found[k]) for k in sorted(found)}


def load_case(directory, index: int) -> tuple[Volume, LabelMask]:
    img_p, msk_p = case_paths(directory, index)
    v, m = read_volume(img_p), read_volume(msk_p)
    if not isinstance(v, Volume) or not isinstance(m, LabelMask):
        raise FormatError(f"case {index}: expected an f32 image and a u8 mask")
    return v, m
