"""Flat INI-style run configuration.

::

    # comment
    [net]
    variant = se
    depth = 2
    [train]
    epochs = 30

Sections are ``[net] [train] [augment] [paths]``. Unknown keys, malformed
lines and out-of-range values are errors that carry the line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .datapipe import NORM_MODES, AugmentConfig
from .errors import ConfigError
from .segnet import VARIANTS, NetConfig
from .train import TrainConfig


@dataclass
class PathsConfig:
    manifest: str | None = None
    checkpoint: str | None = None
    output_dir: str = "runs"
    history: str | None = None


@dataclass
class EvalConfig:
    threshold: float = 0.5
    image_size: int = 0  # 0 keeps the native resolution
    normalization: str = "image"  # or "dataset": training-split statistics for every split


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        ckpt = self.paths.checkpoint
        return dataclasses.replace(self.train, checkpoint_path=ckpt)


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_interval(v):
    return 0 < v <= 1


# (section, key) -> (range predicate, human-readable range)
_RANGES: dict[tuple[str, str], tuple[Callable[[Any], bool], str]] = {
    ("net", "variant"): (lambda v: v in VARIANTS, f"one of {VARIANTS}"),
    ("net", "depth"): (lambda v: v >= 1, ">= 1"),
    ("net", "base_channels"): (lambda v: v >= 1, ">= 1"),
    ("net", "in_channels"): (lambda v: v >= 1, ">= 1"),
    ("net", "reduction"): (lambda v: v >= 1, ">= 1"),
    ("net", "spatial_kernel"): (lambda v: v >= 1 and v % 2 == 1, "odd and >= 1"),
    ("net", "skip_mode"): (lambda v: v in ("concat", "add"), "'concat' or 'add'"),
    ("net", "downsample"): (lambda v: v in ("conv", "maxpool"), "'conv' or 'maxpool'"),
    ("net", "image_size"): (_non_negative, ">= 0"),
    ("net", "normalization"): (lambda v: v in NORM_MODES, f"one of {NORM_MODES}"),
    ("train", "epochs"): (_non_negative, ">= 0"),
    ("train", "batch_size"): (lambda v: v >= 1, ">= 1"),
    ("train", "lr"): (_positive, "> 0"),
    ("train", "optimizer"): (lambda v: v in ("sgd", "adam"), "'sgd' or 'adam'"),
    ("train", "momentum"): (lambda v: 0 <= v < 1, "in [0, 1)"),
    ("train", "step_interval"): (lambda v: v >= 1, ">= 1"),
    ("train", "step_factor"): (_unit_interval, "in (0, 1]"),
    ("train", "plateau_patience"): (lambda v: v >= 1, ">= 1"),
    ("train", "plateau_factor"): (_unit_interval, "in (0, 1]"),
    ("train", "min_lr"): (_positive, "> 0"),
    ("train", "bce_weight"): (_non_negative, ">= 0"),
    ("train", "dice_weight"): (_non_negative, ">= 0"),
    ("train", "threshold"): (lambda v: 0 <= v <= 1, "in [0, 1]"),
    ("augment", "rotation_deg"): (_non_negative, ">= 0"),
    ("augment", "scale_min"): (_positive, "> 0"),
    ("augment", "scale_max"): (_positive, "> 0"),
    ("augment", "elastic_alpha"): (_non_negative, ">= 0"),
    ("augment", "elastic_sigma"): (_positive, "> 0"),
    ("augment", "smooth_sigma"): (_positive, "> 0"),
    ("augment", "smooth_radius"): (lambda v: v >= 1, ">= 1"),
}


@dataclass(frozen=True)
class KeySpec:
    section: str
    key: str
    target: str  # attribute of RunConfig holding the value
    type: type
    default: Any
    optional: bool = False


def _specs() -> list[KeySpec]:
    out = []
    defaults = RunConfig()
    for section, target, skip in (("net", "net", ()), ("train", "train", ("checkpoint_path",)),
                                  ("augment", "augment", ()), ("paths", "paths", ())):
        obj = getattr(defaults, target)
        for f in dataclasses.fields(obj):
            if f.name in skip:
                continue
            default = getattr(obj, f.name)
            typ = {"int": int, "float": float, "bool": bool, "str": str}.get(
                str(f.type).split(" |")[0], str)
            out.append(KeySpec(section, f.name, target, typ, default, "None" in str(f.type)))
    out.append(KeySpec("train", "threshold", "eval", float, defaults.eval.threshold))
    out.append(KeySpec("net", "image_size", "eval", int, defaults.eval.image_size))
    out.append(KeySpec("net", "normalization", "eval", str, defaults.eval.normalization))
    return out


KEYS: list[KeySpec] = _specs()
_BY_SECTION: dict[str, dict[str, KeySpec]] = {}
for _s in KEYS:
    _BY_SECTION.setdefault(_s.section, {})[_s.key] = _s
SECTIONS = tuple(_BY_SECTION)


def flag_name(spec: KeySpec) -> str:
    """Command-line flag for a key; keys shared by several sections get a section prefix."""
    shared = sum(1 for s in KEYS if s.key == spec.key) > 1
    name = f"{spec.section}_{spec.key}" if shared else spec.key
    return "--" + name.replace("_", "-")


def _convert(spec: KeySpec, raw: str, where: str):
    raw = raw.strip()
    if spec.optional and raw.lower() in ("", "none"):
        return None
    try:
        if spec.type is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                value = True
            elif low in ("0", "false", "no", "off"):
                value = False
            else:
                raise ValueError(raw)
        elif spec.type is int:
            value = int(raw)
        elif spec.type is float:
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{where}: {spec.section}.{spec.key} expects {spec.type.__name__}, got {raw!r}") from None
    check = _RANGES.get((spec.section, spec.key))
    if check is not None and not check[0](value):
        raise ConfigError(f"{where}: {spec.section}.{spec.key} = {raw} out of range (must be {check[1]})")
    return value


def set_value(cfg: RunConfig, spec: KeySpec, raw: str, where: str) -> None:
    setattr(getattr(cfg, spec.target), spec.key, _convert(spec, raw, where))


def lookup(section: str, key: str, where: str) -> KeySpec:
    spec = _BY_SECTION.get(section, {}).get(key)
    if spec is None:
        raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
    return spec


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in _BY_SECTION:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        set_value(cfg, lookup(section, key, where), raw, where)
    _validate(cfg, source)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def _validate(cfg: RunConfig, source: str) -> None:
    try:
        cfg.net.validate()
        cfg.train.validate()
        cfg.augment.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def apply_overrides(cfg: RunConfig, overrides: dict[KeySpec, str]) -> RunConfig:
    for spec, raw in overrides.items():
        set_value(cfg, spec, str(raw), flag_name(spec))
    _validate(cfg, "command line")
    return cfg


def render_defaults() -> str:
    """Every recognised key with its default, grouped by section."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for spec in _BY_SECTION[section].values():
            lines.append(f"  {spec.key} = {spec.default}    ({flag_name(spec)})")
    return "\n".join(lines)
