"""``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are coerced to the type
of the corresponding default; unknown keys are rejected.
"""
from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "lambda_c": 0.1,
    "lambda_d": 1.0,
    "lambda_s": 1.0,
    "lambda_lap": 0.5,
    "lambda_adv": 0.1,
    "delta": 1e-3,
    "patience": 50,
    "t_max": 1000,
    "external_cycles": 3,
    "batch_size": 4,
    "seed": 0,
    "rgb_only": False,
    "lr_pose": 1e-3,
    "lr_vertices": None,
    "lr_texture": 1e-2,
    "lr_discriminator": 1e-4,
    "sigma": 1e-4,
    "gamma": 1e-4,
    "depth_tolerance": 0.01,
    "max_neighbor_angle": 15.0,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", "auto") and default is None:
        return None
    try:
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())
