"""Plain-text key-value configuration files.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines
ignored.  Values are free-form strings; list-valued keys use commas within
an item and semicolons between items, e.g.
``bs_positions = 0,0,4; 14,0,4``.
"""

from __future__ import annotations

import numpy as np


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def as_float(value: str) -> float:
    return float(value)


def as_int(value: str) -> int:
    return int(value)


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def as_float_list(value: str) -> tuple[float, ...]:
    return tuple(float(x) for x in value.split(",") if x.strip())


def as_int_list(value: str) -> tuple[int, ...]:
    return tuple(int(x) for x in value.split(",") if x.strip())


def as_vectors(value: str, width: int) -> np.ndarray:
    """Semicolon-separated list of comma-separated ``width``-vectors."""
    rows = []
    for item in value.split(";"):
        item = item.strip()
        if not item:
            continue
        vec = [float(x) for x in item.split(",")]
        if len(vec) != width:
            raise ValueError(f"expected {width} components, got {item!r}")
        rows.append(vec)
    return np.asarray(rows, dtype=np.float64).reshape(-1, width)
