"""Flat key=value config files mapped onto dataclasses.

Lines are `key = value`, `#` starts a comment, blank lines are skipped.
Keys must match dataclass field names exactly; values are coerced to the
field's annotated type. Unknown keys are an error so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")


def parse_kv_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _coerce(value: str, target_type: Any) -> Any:
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse bool from {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return value
    raise ValueError(f"unsupported config field type {target_type}")


def dataclass_from_kv(cls: type[T], mapping: dict[str, str], source: str = "config") -> T:
    """Build a dataclass instance from string key/values, defaults filling gaps."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise ValueError(f"{source}: unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(raw, _field_type(fields[key]))
    return cls(**kwargs)


def _field_type(f: dataclasses.Field) -> Any:
    # Field types arrive as strings under `from __future__ import annotations`.
    t = f.type
    if isinstance(t, str):
        return {"int": int, "float": float, "str": str, "bool": bool}[t]
    return t


def load_dataclass(cls: type[T], path: str | Path) -> T:
    return dataclass_from_kv(cls, parse_kv_file(path), source=str(path))


def dump_dataclass(obj: Any) -> str:
    """Render a dataclass as a key=value file body (round-trips with load)."""
    lines = [f"{f.name} = {getattr(obj, f.name)}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"
