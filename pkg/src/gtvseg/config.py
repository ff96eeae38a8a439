"""TOML run configuration with dotted keys (``network.*``, ``train.*``, ``paths.*``)."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .nn import NetworkConfig
from .training import TrainConfig

DESK_CHANNELS = (8, 16, 32, 64)

_NETWORK_KEYS = {"base_channels", "pe_reduction", "kernel_mode", "in_channels", "out_classes", "patch_shape"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = {"data", "cases"}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(base_channels=DESK_CHANNELS))
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: Path | None = None
    # case indices used for training; None takes every case in data_dir
    cases: list[int] | None = None


def parse_indices(spec) -> list[int]:
    """``[0, 1, 5]``, ``"0-19"`` or ``"0-3,7"`` to a sorted list of ints."""
    if isinstance(spec, list):
        items = spec
    elif isinstance(spec, str):
        items = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        raise ConfigError(f"case indices must be a list or a string, got {type(spec).__name__}")
    out: set[int] = set()
    for it in items:
        if isinstance(it, bool):
            raise ConfigError(f"bad case index {it!r}")
        if isinstance(it, int):
            out.add(it)
            continue
        try:
            if "-" in str(it):
                a, b = (int(x) for x in str(it).split("-", 1))
                if b < a:
                    raise ValueError
                out.update(range(a, b + 1))
            else:
                out.add(int(it))
        except ValueError:
            raise ConfigError(f"bad case index range {it!r}") from None
    if any(i < 0 for i in out):
        raise ConfigError("case indices must be non-negative")
    return sorted(out)


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def config_from_dict(tree: dict, base_dir: Path | None = None) -> RunConfig:
    flat = _flatten(tree)
    net_kw, train_kw = {}, {}
    cfg = RunConfig()
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section == "network" and name in _NETWORK_KEYS:
            net_kw[name] = value
        elif section == "train" and name in _TRAIN_KEYS:
            train_kw[name] = value
        elif section == "paths" and name in _PATH_KEYS:
            if name == "data":
                p = Path(value)
                cfg.data_dir = p if p.is_absolute() or base_dir is None else base_dir / p
            else:
                cfg.cases = parse_indices(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "base_channels" in net_kw:
        net_kw["levels"] = len(net_kw["base_channels"])
    try:
        cfg.network = dataclasses.replace(cfg.network, **net_kw)
        cfg.train = dataclasses.replace(cfg.train, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        tree = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(tree, path.parent)


def dump_config(cfg: RunConfig) -> str:
    """Render a config as TOML that ``load_config`` reads back to an equal RunConfig."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    net = cfg.network.to_dict()
    lines = [f"network.{k} = {val(net[k])}" for k in sorted(_NETWORK_KEYS)]
    lines += [f"train.{k} = {val(v)}" for k, v in cfg.train.to_dict().items()]
    if cfg.data_dir is not None:
        lines.append(f"paths.data = {val(str(cfg.data_dir))}")
    if cfg.cases is not None:
        lines.append(f"paths.cases = {val(cfg.cases)}")
    return "\n".join(lines) + "\n"
