"""``key = value`` text form for flat dataclass configs."""

from __future__ import annotations

import hashlib
from dataclasses import fields


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_typed(type_name, raw: str):
    """Parse ``raw`` according to a (stringified) dataclass annotation."""
    t = str(type_name).replace(" ", "")
    raw = str(raw).strip()
    if t.startswith("tuple["):
        inner = t[len("tuple[") : -1].split(",")[0]
        return tuple(parse_typed(inner, x) for x in raw.replace(" ", "").split(",") if x)
    if t == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "None" in t and raw.lower() in ("none", ""):
        return None
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def to_lines(obj) -> list[str]:
    return [f"{f.name} = {format_value(getattr(obj, f.name))}" for f in fields(obj)]


def from_mapping(cls, kv: dict[str, str]):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(kv) - set(known))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**{name: parse_typed(known[name].type, raw) for name, raw in kv.items()})


def config_hash(obj, length: int = 16) -> str:
    text = "\n".join(to_lines(obj)) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]
