"""INI-style configuration files with nested sections; every CLI flag can
override a config key and vice versa (flags win)."""

from __future__ import annotations

import configparser
import dataclasses
import os

from .errors import ConfigError


def load_config_file(path) -> dict:
    """Sections -> key -> raw string. Missing file is a config error."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def parse_like(text: str, like):
    """Parse a raw string with the type (and arity) of an example value."""
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        inner = like[0] if like else 0.0
        return tuple(parse_like(p, inner) for p in parts)
    if isinstance(like, list):
        parts = [p for p in text.replace(",", " ").split() if p]
        inner = like[0] if like else ""
        return [parse_like(p, inner) for p in parts]
    return text


def build_dataclass(cls, section: dict | None, overrides: dict | None = None):
    """Instantiate a flat dataclass from a config section plus overrides.

    Unknown keys in the section raise; None-valued overrides are ignored so
    unset CLI flags fall through to the config and then the defaults.
    """
    section = dict(section or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in section.items():
        name = key.replace("-", "_")
        if name not in defaults:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        f = defaults[name]
        if dataclasses.is_dataclass(f.type) or f.name in values:
            continue
        example = _field_example(cls, f)
        if dataclasses.is_dataclass(example):
            continue  # nested configs come from their own sections
        values[name] = parse_like(raw, example)
    values.update(overrides)
    return cls(**values)


def _field_example(cls, f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    raise ConfigError(f"{cls.__name__}.{f.name} has no default to infer a type from")
