"""INI configuration files with flat command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, Type, TypeVar

from .search import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, kind: str, raw) -> object:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError([f"{name}: cannot parse {text!r} as {kind}"]) from None
    return text


def field_kinds(cls) -> Dict[str, str]:
    """Field name -> one of int, float, bool, str (annotations are strings here)."""
    return {f.name: str(f.type) for f in fields(cls)}


def read_ini(path, sections: Iterable[str]) -> Dict[str, str]:
    """Flatten the named sections of an INI file; later sections win."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError([f"config: {exc}"]) from None
    values: Dict[str, str] = {}
    for section in sections:
        if parser.has_section(section):
            values.update(parser.items(section))
    return values


def build(cls: Type[T], file_values: Dict[str, str] | None = None, overrides: Dict[str, object] | None = None,
          strict_file: bool = False) -> T:
    """Instantiate ``cls`` from file values overlaid with flag overrides (flags win).

    Unknown keys from the file are ignored unless ``strict_file`` is set, so
    one file can carry ``[search]`` and ``[eval]`` sections side by side.
    """
    kinds = field_kinds(cls)
    merged: Dict[str, object] = {}
    errors = []
    for source, strict in ((file_values or {}, strict_file), (overrides or {}, True)):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in kinds:
                if strict:
                    errors.append(f"{key}: unknown field")
                continue
            try:
                merged[key] = _convert(key, kinds[key], raw)
            except ConfigError as exc:
                errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    obj = cls(**merged)
    obj.validate()
    return obj


def write_ini(path, section: str, obj) -> None:
    parser = configparser.ConfigParser()
    parser[section] = {k: str(v) for k, v in obj.to_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)


def load_ini_config(cls: Type[T], path: str | Path | None, section: str, overrides=None) -> T:
    values = read_ini(path, ("data", section)) if path else {}
    return build(cls, values, overrides)
