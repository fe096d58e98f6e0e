"""Line-oriented ``key=value`` files with ``#`` comments, mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(encoding="utf-8"), str(p))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(_coerce(t.strip(), inner, key) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_kv(cls, values: dict[str, str], strict: bool = True):
    """Build dataclass ``cls`` from string values; unknown keys are errors when strict."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - fields
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items() if k in fields}
    return cls(**kwargs)


def split_known(cls, values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    return ({k: v for k, v in values.items() if k in names}, {k: v for k, v in values.items() if k not in names})


def to_lines(obj) -> list[str]:
    return [f"{f.name}={format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj) if f.init]
