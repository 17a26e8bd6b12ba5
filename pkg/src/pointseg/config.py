"""Run configuration and the key-value config file format.

Config files are plain text, one `key = value` per line, `#` comments.
Nested keys use dots (hint.tau = 150). Lists are comma separated
(aug.set = scale,crop,flip).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .contrastive import ALL_KINDS
from .hints import HintConfig
from .model import EncoderConfig
from .regulator import RegulatorConfig

STRATEGIES = ("hint", "square", "point", "predmap", "scribble")
CONTRASTIVE_LOSSES = ("l1", "mse", "kl", "cos")


@dataclass(frozen=True)
class ContrastiveConfig:
    enabled: bool = True
    loss: str = "l1"
    stopgrad: bool = True
    predictor: bool = True
    symmetrize: bool = False
    normalize: str = "mean"  # mean | sum
    border_exclude: int = 4  # loss-excluded band when geometry is active

    def __post_init__(self) -> None:
        if self.loss not in CONTRASTIVE_LOSSES:
            raise ValueError(f"contrastive.loss must be one of {CONTRASTIVE_LOSSES}")
        if self.normalize not in ("mean", "sum"):
            raise ValueError("contrastive.normalize must be 'mean' or 'sum'")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    input_size: int = 64
    epochs: int = 60
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_base_frac: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    strategy: str = "hint"  # hint | square | point | predmap | scribble
    epochs_total_includes_warmup: bool = True
    aug_set: tuple[str, ...] = ALL_KINDS
    hint: HintConfig = field(default_factory=HintConfig)
    regulator: RegulatorConfig = field(default_factory=RegulatorConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self) -> None:
        if self.input_size % 32:
            raise ValueError("input_size must be divisible by 32")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.epochs <= self.hint.w:
            raise ValueError("epochs must exceed the warm-up length w")
        for kind in self.aug_set:
            if kind not in ALL_KINDS:
                raise ValueError(f"unknown augmentation kind {kind!r}")
        object.__setattr__(self, "aug_set", tuple(self.aug_set))

    def effective_aug_set(self) -> tuple[str, ...]:
        aug = list(self.aug_set)
        if not self.regulator.enabled and "regulator_mask" in aug:
            aug.remove("regulator_mask")
        if not self.contrastive.enabled:
            return ()
        return tuple(aug)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aug_set"] = list(self.aug_set)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


_SECTIONS = {"hint": "hint", "regulator": "regulator",
             "contrastive": "contrastive", "encoder": "encoder", "aug": None}


def _coerce(raw: str, target: Any) -> Any:
    raw = raw.strip()
    if target is None:
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if len(items) > 1:
            try:
                return tuple(int(v) for v in items)
            except ValueError:
                return tuple(items)
        for cast in (int, float):
            try:
                return cast(raw)
            except ValueError:
                continue
        return raw
    if isinstance(target, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        return int(raw)
    if isinstance(target, float):
        return float(raw)
    if isinstance(target, tuple):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if target and isinstance(target[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    if target is None:
        return raw
    return raw


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply dotted-key string overrides (the config file / CLI format)."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {}
    for key, raw in overrides.items():
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section == "aug" and name == "set":
                items = tuple(v.strip() for v in str(raw).split(",") if v.strip())
                top["aug_set"] = items
                continue
            if section not in _SECTIONS or _SECTIONS[section] is None:
                raise KeyError(f"unknown config section {section!r}")
            sub = getattr(cfg, _SECTIONS[section])
            if not hasattr(sub, name):
                raise KeyError(f"unknown config key {key!r}")
            value = _coerce(str(raw), getattr(sub, name)) if isinstance(raw, str) else raw
            sections.setdefault(section, {})[name] = value
        else:
            if key == "aug_set":
                value = tuple(v.strip() for v in str(raw).split(",")) if isinstance(raw, str) else tuple(raw)
            elif not hasattr(cfg, key):
                raise KeyError(f"unknown config key {key!r}")
            else:
                value = _coerce(str(raw), getattr(cfg, key)) if isinstance(raw, str) else raw
            top[key] = value
    for section, vals in sections.items():
        top[section] = replace(getattr(cfg, section), **vals)
    return replace(cfg, **top) if top else cfg


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base=base)
