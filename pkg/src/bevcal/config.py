"""Flat ``key = value`` files with ``#`` comments.

Used for rig configs, SCM parameter files and run settings. Values stay
strings until a caller asks for a type, so unknown keys can be reported
instead of silently ignored.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(), str(path))


def format_kv(values: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, (list, tuple)):
            value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path: str | Path, values: dict, header: str | None = None) -> None:
    Path(path).write_text(format_kv(values, header))


def to_float(values: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in values:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return float(default)
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"key {key!r}: not a number: {values[key]!r}") from None


def to_floats(values: dict[str, str], key: str, default=None) -> list[float]:
    if key not in values:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return [float(v) for v in default]
    text = values[key].strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a list of numbers, got {values[key]!r}") from None


def to_bool(values: dict[str, str], key: str, default: bool = False) -> bool:
    if key not in values:
        return default
    v = values[key].strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {values[key]!r}")
