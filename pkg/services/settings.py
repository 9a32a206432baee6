"""
settings.py — BenchmarkConfig and the key=value config format.

A config file is UTF-8 text, one `key=value` per line.  Blank lines and
lines starting with `#` are ignored.  Keys and their defaults are the ones
in config.BENCH_CONFIG_DEFAULT; anything else is rejected.  CLI flags are
applied on top of the file as overrides.

Values are coerced by the type of their default:
  int / float   decimal literals (an int key rejects "2.5")
  bool          true/false, yes/no, on/off, 1/0
  str           taken verbatim
  bb_thetas     comma-separated floats, e.g. "15,30,45"
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any

from config import (
    BENCH_CONFIG_DEFAULT,
    CHOICES,
    NON_NEGATIVE_KEYS,
    POSITIVE_KEYS,
    REQUIRED_KEYS,
)

logger = logging.getLogger(__name__)

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")
_TUPLE_KEYS = ("bb_thetas",)


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_thetas(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class BenchmarkConfig:
    model: str = BENCH_CONFIG_DEFAULT["model"]
    dataset: str = BENCH_CONFIG_DEFAULT["dataset"]
    images: int = BENCH_CONFIG_DEFAULT["images"]
    seed: int = BENCH_CONFIG_DEFAULT["seed"]

    classes: int = BENCH_CONFIG_DEFAULT["classes"]
    image_size: int = BENCH_CONFIG_DEFAULT["image_size"]
    train_per_class: int = BENCH_CONFIG_DEFAULT["train_per_class"]
    train_epochs: int = BENCH_CONFIG_DEFAULT["train_epochs"]
    adv_eps: float = BENCH_CONFIG_DEFAULT["adv_eps"]
    adv_pgd_steps: int = BENCH_CONFIG_DEFAULT["adv_pgd_steps"]

    wb_budget: int = BENCH_CONFIG_DEFAULT["wb_budget"]
    wb_quantization: str = BENCH_CONFIG_DEFAULT["wb_quantization"]
    wb_curve: bool = BENCH_CONFIG_DEFAULT["wb_curve"]
    pgd_compare: bool = BENCH_CONFIG_DEFAULT["pgd_compare"]
    bp_pull: float = BENCH_CONFIG_DEFAULT["bp_pull"]
    bp_margin: float = BENCH_CONFIG_DEFAULT["bp_margin"]

    bb_queries: int = BENCH_CONFIG_DEFAULT["bb_queries"]
    bb_quantization: str = BENCH_CONFIG_DEFAULT["bb_quantization"]
    bb_curve_points: int = BENCH_CONFIG_DEFAULT["bb_curve_points"]
    bb_thetas: tuple[float, ...] = _parse_thetas(BENCH_CONFIG_DEFAULT["bb_thetas"])
    bb_dct_fraction: float = BENCH_CONFIG_DEFAULT["bb_dct_fraction"]
    bb_init_draws: int = BENCH_CONFIG_DEFAULT["bb_init_draws"]
    bb_init_bisections: int = BENCH_CONFIG_DEFAULT["bb_init_bisections"]
    bb_refine_steps: int = BENCH_CONFIG_DEFAULT["bb_refine_steps"]

    grid_points: int = BENCH_CONFIG_DEFAULT["grid_points"]
    workers: int = BENCH_CONFIG_DEFAULT["workers"]
    out: str | None = BENCH_CONFIG_DEFAULT["out"]

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready echo of every key, in declaration order."""
        data = asdict(self)
        data["bb_thetas"] = list(self.bb_thetas)
        return data

    def to_text(self) -> str:
        """Canonical config text; parse_config(cfg.to_text()) == cfg."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name}={_render(value)}")
        return "\n".join(lines) + "\n"


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _coerce(key: str, raw: object) -> object:
    default = BENCH_CONFIG_DEFAULT[key]
    if not isinstance(raw, str):
        return _check_typed(key, raw, default)

    text = raw.strip()
    try:
        if key in _TUPLE_KEYS:
            values = _parse_thetas(text)
            if not values:
                raise ValueError("empty list")
            return values
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"'{key}': cannot parse {text!r} ({e})", key=key) from e
    if not text:
        raise ConfigError(f"'{key}' is empty", key=key)
    return text


def _check_typed(key: str, value: object, default: object) -> object:
    """Values coming from CLI flags are already typed; check they match."""
    if key in _TUPLE_KEYS:
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"'{key}': expected {type(default or '').__name__}, got {value!r}", key=key)
    return value


def _validate(values: dict[str, object]) -> None:
    for key in POSITIVE_KEYS:
        if not values[key] > 0:
            raise ConfigError(f"'{key}' must be positive, got {values[key]}", key=key)
    for key in NON_NEGATIVE_KEYS:
        if values[key] < 0:
            raise ConfigError(f"'{key}' must be non-negative, got {values[key]}", key=key)
    for key, allowed in CHOICES.items():
        if values[key] not in allowed:
            raise ConfigError(f"'{key}' must be one of {', '.join(allowed)}, got {values[key]!r}", key=key)
    if values["bb_dct_fraction"] > 1:
        raise ConfigError("'bb_dct_fraction' must not exceed 1", key="bb_dct_fraction")
    if any(not 0 < t < 90 for t in values["bb_thetas"]):
        raise ConfigError("'bb_thetas' must lie strictly between 0 and 90 degrees", key="bb_thetas")
    if values["image_size"] % 2:
        raise ConfigError(f"'image_size' must be even, got {values['image_size']}", key="image_size")
    if values["wb_budget"] < 2:
        raise ConfigError(f"'wb_budget' must be at least 2, got {values['wb_budget']}", key="wb_budget")
    if values["grid_points"] < 3:
        raise ConfigError(f"'grid_points' must be at least 3, got {values['grid_points']}", key="grid_points")
    for key in REQUIRED_KEYS:
        if values[key] is None:
            raise ConfigError(f"missing required key '{key}'", key=key)


def parse_lines(text: str) -> dict[str, str]:
    """Raw key → value strings from config text; no coercion."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        if key not in BENCH_CONFIG_DEFAULT:
            raise ConfigError(f"unknown key '{key}' on line {lineno}", key=key)
        if key in raw:
            raise ConfigError(f"duplicate key '{key}' on line {lineno}", key=key)
        raw[key] = value
    return raw


def parse_config(text: str = "", overrides: dict[str, object] | None = None) -> BenchmarkConfig:
    """
    Parse config text, apply overrides (None values are ignored, so argparse
    defaults can be passed straight through) and validate the result.
    Raises ConfigError naming the offending key.
    """
    merged: dict[str, object] = dict(parse_lines(text))
    for key, value in (overrides or {}).items():
        if key not in BENCH_CONFIG_DEFAULT:
            raise ConfigError(f"unknown key '{key}'", key=key)
        if value is not None:
            merged[key] = value

    values: dict[str, object] = {
        f.name: getattr(BenchmarkConfig, f.name) for f in fields(BenchmarkConfig)
    }
    for key, raw in merged.items():
        values[key] = _coerce(key, raw)
    _validate(values)
    logger.debug("config: %s", values)
    return BenchmarkConfig(**values)
