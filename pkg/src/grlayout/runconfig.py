"""Flat key=value run configuration.

Config files are plain text, one `section.key=value` per line, `#` comments.
No nesting, no quoting: trivially diffable in experiment logs.  Values are
coerced by the annotated type of the dataclass field they land on; unknown
keys are errors so typos never silently become defaults.
"""

from __future__ import annotations

import dataclasses


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=path)


def parse_kv_args(pairs: list[str]) -> dict[str, str]:
    """Parse `--set key=value` style overrides."""
    out: dict[str, str] = {}
    for p in pairs:
        if "=" not in p:
            raise ValueError(f"override {p!r}: expected key=value")
        key, _, value = p.partition("=")
        out[key.strip()] = value.strip()
    return out


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def coerce(key: str, value: str, ftype: str):
    """Convert a raw string by a dataclass field's annotation string."""
    t = ftype.replace(" ", "")
    if "None" in t and value.lower() in ("none", "null", ""):
        return None
    base = t.split("|")[0]
    if base == "bool":
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if base == "int":
        try:
            return int(value)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    if base == "float":
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {value!r}") from None
    if base == "str":
        return value
    raise ValueError(f"{key}: unsupported config field type {ftype!r}")


def apply_section(obj, prefix: str, flat: dict[str, str], used: set[str]) -> None:
    """Set `prefix.name` keys from `flat` onto dataclass `obj`, typed."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in flat.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in fields:
            known = ", ".join(f"{prefix}.{n}" for n in sorted(fields))
            raise ValueError(f"unknown config key {key!r}; known: {known}")
        setattr(obj, name, coerce(key, value, str(fields[name].type)))
        used.add(key)


def check_consumed(flat: dict[str, str], used: set[str]) -> None:
    left = sorted(set(flat) - used)
    if left:
        raise ValueError(f"unrecognized config keys: {', '.join(left)}")


def format_flat(flat: dict[str, object]) -> str:
    """Render a resolved configuration, sorted, one key per line."""
    return "\n".join(f"{k}={flat[k]}" for k in sorted(flat)) + "\n"


def dataclass_flat(obj, prefix: str) -> dict[str, object]:
    return {f"{prefix}.{f.name}": getattr(obj, f.name)
            for f in dataclasses.fields(obj)}
