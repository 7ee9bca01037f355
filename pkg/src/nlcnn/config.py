"""Run configuration: ``key = value`` lines, ``#`` comments, dotted keys.

Every key is checked against a closed schema; any problem is reported with
its line and column and nothing is partially applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from .network import PRESET_NAMES
from .nonlocal_block import Variant
from .training import LOSSES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0, source: str = "<config>"):
        super().__init__(f"{source}:{line}:{column}: {message}")
        self.line = line
        self.column = column
        self.reason = message


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int(text: str) -> int:
    return int(text, 10)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _variant(text: str) -> str:
    return Variant.parse(text).value


_TYPE_PARSERS = {int: _parse_int, float: float, bool: _parse_bool, str: str}
_TRAIN_SKIP = ("loss", "seed")  # top-level keys


def _train_schema() -> Dict[str, Callable[[str], Any]]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in fields(TrainConfig):
        if f.name in _TRAIN_SKIP:
            continue
        kind = hints[f.type] if isinstance(f.type, str) else f.type
        out[f"train.{f.name}"] = _TYPE_PARSERS[kind]
    return out


SCHEMA: Dict[str, Callable[[str], Any]] = {
    "preset": _choice(PRESET_NAMES),
    "variant": _variant,
    "loss": _choice(LOSSES),
    "seed": _parse_int,
    "paths.manifest": str,
    "paths.trials": str,
    "paths.validation": str,
    "paths.checkpoint_dir": str,
    "paths.resume": str,
    "paths.log": str,
    "train.strict_manifest": _parse_bool,
    "train.freeze_nonlocal_output": _parse_bool,
    **_train_schema(),
}


@dataclass
class RunConfig:
    preset: str = "var2"
    variant: str = Variant.TIME_FREQUENCY.value
    loss: str = "ams"
    seed: int = 0
    paths: Dict[str, str] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        opts = {k: v for k, v in self.train.items() if k in TrainConfig.field_names()}
        return TrainConfig.desk(loss=self.loss, seed=self.seed, **opts)

    def path(self, key: str, base: Optional[Path] = None) -> Optional[Path]:
        value = self.paths.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() or base is None else base / p

    def to_text(self) -> str:
        lines = [f"preset = {self.preset}", f"variant = {self.variant}", f"loss = {self.loss}",
                 f"seed = {self.seed}"]
        lines += [f"paths.{k} = {v}" for k, v in self.paths.items()]
        lines += [f"train.{k} = {v}" for k, v in self.train.items()]
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    seen: Dict[str, int] = {}
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            col = len(line) - len(line.lstrip()) + 1
            raise ConfigError("expected 'key = value'", lineno, col, source)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        key_col = len(key_part) - len(key_part.lstrip()) + 1
        value = value_part.strip()
        value_col = len(key_part) + 1 + (len(value_part) - len(value_part.lstrip())) + 1
        if not key:
            raise ConfigError("missing key before '='", lineno, key_col, source)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, key_col, source)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, key_col, source)
        if not value:
            raise ConfigError(f"missing value for {key!r}", lineno, value_col, source)
        try:
            values[key] = SCHEMA[key](value)
            name = key[len("train."):]
            if key.startswith("train.") and name in TrainConfig.field_names():
                TrainConfig.desk(**{name: values[key]})
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, value_col, source) from None
        seen[key] = lineno

    cfg = RunConfig()
    for key, value in values.items():
        if key.startswith("paths."):
            cfg.paths[key[len("paths."):]] = value
        elif key.startswith("train."):
            cfg.train[key[len("train."):]] = value
        else:
            setattr(cfg, key, value)
    try:
        cfg.train_config()
    except ValueError as exc:
        line = seen.get("loss", min(seen.values(), default=0))
        raise ConfigError(f"inconsistent training settings: {exc}", line, 1, source) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))

