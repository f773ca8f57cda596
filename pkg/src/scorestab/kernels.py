"""Kernel dispatch: compiled core when available, NumPy fallback otherwise.

Set ``SCORESTAB_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SCORESTAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

posterior_stats = _impl.posterior_stats
posterior_weights = _impl.posterior_weights
bump_features = _impl.bump_features
nearest_neighbours = _impl.nearest_neighbours

__all__ = ["BACKEND", "posterior_stats", "posterior_weights", "bump_features", "nearest_neighbours"]
