"""Versioned ``key = value`` text records for nested dataclasses.

Nested dataclass fields are flattened to dotted keys (``crf.n_iters``). Lists
are comma separated, ``none`` is None. Parsing rejects unknown keys.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from typing import Any, Mapping

from dfnet.errors import ConfigError

FORMAT_VERSION = 1


def _kv_fields(cls_or_obj):
    return [f for f in dataclasses.fields(cls_or_obj) if f.metadata.get("kv", True)]


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in _kv_fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _format(value)
    return out


def dumps(obj, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines.append(f"version = {FORMAT_VERSION}")
    lines += [f"{k} = {v}" for k, v in flatten(obj).items()]
    return "\n".join(lines) + "\n"


def parse_lines(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _parse_value(text: str, tp, key: str):
    tp, optional = _strip_optional(tp)
    if text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key}: value may not be none")
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin in (list, tuple):
            (inner,) = typing.get_args(tp)[:1] or (str,)
            items = [s.strip() for s in text.split(",") if s.strip()]
            values = [_parse_value(s, inner, key) for s in items]
            return values if origin is list else tuple(values)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def build(cls, entries: Mapping[str, str], prefix: str = "", consumed: set | None = None):
    """Instantiate ``cls`` from flattened entries, defaults filling any gaps."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in _kv_fields(cls):
        tp = hints[f.name]
        base, _ = _strip_optional(tp)
        key = prefix + f.name
        if dataclasses.is_dataclass(base):
            kwargs[f.name] = build(base, entries, key + ".", consumed)
        elif key in entries:
            kwargs[f.name] = _parse_value(entries[key], tp, key)
            if consumed is not None:
                consumed.add(key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def loads(cls, text: str, extra_keys: tuple[str, ...] = ()):
    entries = parse_lines(text)
    version = entries.pop("version", None)
    if version is None:
        raise ConfigError("missing 'version' key")
    if version != str(FORMAT_VERSION):
        raise ConfigError(f"unsupported config version {version}")
    consumed: set[str] = set()
    obj = build(cls, entries, consumed=consumed)
    unknown = sorted(set(entries) - consumed - set(extra_keys))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return obj
