"""key=value text configs for the dataclass settings objects.

One ``key=value`` pair per line; ``#`` starts a comment. Tuples are written
comma-separated. Unknown keys are an error so typos do not pass silently.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(text, kind):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    return kind(text.strip())


def _parse(text, default):
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        kinds = [type(d) for d in default] or [float]
        if len(kinds) == len(parts):
            return tuple(_parse_scalar(p, k) for p, k in zip(parts, kinds))
        return tuple(_parse_scalar(p, kinds[0]) for p in parts)
    if default is None:
        return text.strip()
    return _parse_scalar(text, type(default))


def dumps(cfg) -> str:
    lines = [f"# {type(cfg).__name__}"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name}={_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def loads(cls, text: str, **overrides):
    """Build ``cls`` from key=value text, starting from its defaults."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r} for {cls.__name__}")
        try:
            values[key] = _parse(val, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    values.update(overrides)
    return cls(**values)


def save(cfg, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def load(cls, path, **overrides):
    return loads(cls, Path(path).read_text(encoding="utf-8"), **overrides)
