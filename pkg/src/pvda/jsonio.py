"""Deterministic JSON: insertion key order, floats at 17 significant digits."""

from __future__ import annotations

import json
import math

import numpy as np


def _scalar(obj) -> str | None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return {None: "null", True: "true", False: "false"}[None if obj is None else bool(obj)]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    return None


def _encode(obj, indent: int | None, level: int) -> str:
    s = _scalar(obj)
    if s is not None:
        return s
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        pairs = [(json.dumps(str(k)), _encode(v, indent, level + 1)) for k, v in obj.items()]
        if indent is None or not pairs:
            return "{" + ", ".join(f"{k}: {v}" for k, v in pairs) + "}"
        pad, end = " " * indent * (level + 1), " " * indent * level
        return "{\n" + ",\n".join(f"{pad}{k}: {v}" for k, v in pairs) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        items = [_encode(v, indent, level + 1) for v in obj]
        flat = all(_scalar(v) is not None for v in obj)
        if indent is None or flat or not items:
            return "[" + ", ".join(items) + "]"
        pad, end = " " * indent * (level + 1), " " * indent * level
        return "[\n" + ",\n".join(pad + v for v in items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int | None = 2) -> str:
    """Serialize ``obj``; ``indent=None`` gives a single line."""
    return _encode(obj, indent, 0)
