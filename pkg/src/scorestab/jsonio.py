"""Canonical JSON encoding and content hashes."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np


def _plain(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any, indent: int | None = 2) -> str:
    """JSON with sorted keys and non-finite floats spelled as strings."""
    return json.dumps(_plain(obj), sort_keys=True, indent=indent, allow_nan=False) + ("\n" if indent else "")


def stable_hash(obj: Any, length: int = 16) -> str:
    return hashlib.sha256(dumps(obj, indent=None).encode("utf-8")).hexdigest()[:length]


__all__ = ["dumps", "stable_hash"]
