"""Square linear assignment, backed by the compiled kernel when it is built.

``BACKEND`` is ``"cython"`` or ``"python"``.  Set ``FEATCRAFT_PURE_PYTHON=1``
to force the fallback.
"""

from __future__ import annotations

import itertools
import os

import numpy as np

from . import _assign_py

if os.environ.get("FEATCRAFT_PURE_PYTHON"):
    _impl = _assign_py
    BACKEND = "python"
else:
    try:
        from . import _assign as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _assign_py
        BACKEND = "python"


def linear_assignment(cost) -> np.ndarray:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _impl.solve(cost)


def pairwise_euclidean(a, b) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _impl.pairwise_euclidean(a, b)


def brute_force_assignment(cost) -> np.ndarray:
    """Exhaustive search over all permutations; only for tiny problems."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n > 8:
        raise ValueError("brute force is limited to n <= 8")
    rows = np.arange(n)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        c = cost[rows, perm].sum()
        if c < best:
            best, best_perm = c, perm
    return np.array(best_perm, dtype=np.int64)
