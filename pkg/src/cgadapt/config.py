"""``key = value`` configuration files.

One assignment per line, ``#`` starts a comment, unknown keys are errors.
Values are coerced to the type of the matching dataclass field.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(raw: str, kind, where: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_lines(lines, fields: dict, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines against ``fields`` (name -> type)."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{source}:{lineno}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, _, value = text.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = _coerce(value, fields[key], where)
    return out


def field_types(cls) -> dict:
    hints = {}
    for f in dataclasses.fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "bool": bool, "str": str}.get(t, str)
        hints[f.name] = t
    return hints


def load_dataclass(cls, path, overrides: dict | None = None):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_lines(lines, field_types(cls), str(path))
    values.update(overrides or {})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_dataclass(obj) -> str:
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))
