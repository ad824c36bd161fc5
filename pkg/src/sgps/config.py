"""Flat ``key = value`` run configuration covering every :class:`TrainConfig` field."""

from __future__ import annotations

import typing
from dataclasses import asdict, fields

from sgps.trainer import TrainConfig

AUTO = "auto"


class ConfigError(ValueError):
    pass


def _field_types():
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for f in fields(TrainConfig):
        t = hints[f.name]
        optional = type(None) in typing.get_args(t)
        base = next((a for a in typing.get_args(t) if a is not type(None)), t) if optional else t
        out[f.name] = (base, optional)
    return out


FIELD_TYPES = _field_types()
KEYS = tuple(FIELD_TYPES)


def format_value(v):
    if v is None:
        return AUTO
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key, text):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    base, optional = FIELD_TYPES[key]
    text = text.strip()
    if optional and text.lower() in (AUTO, "none", ""):
        return None
    try:
        if base is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key} ({base.__name__})") from None


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of typed overrides."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return out


def serialize_config(cfg):
    return "".join(f"{k} = {format_value(v)}\n" for k, v in asdict(cfg).items())


def build_config(file_text=None, overrides=None):
    """Defaults, then file values, then explicit overrides."""
    values = {}
    if file_text is not None:
        values.update(parse_config_text(file_text))
    for k, v in (overrides or {}).items():
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
