"""Linear assignment with a compiled core and a pure-Python fallback.

The backend is chosen once at import. Set ``CSPIPE_PURE_PYTHON=1`` to force
the fallback (useful for benchmarking or when the extension is not built).
"""
import logging
import os

import numpy as np

from . import _lap_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("CSPIPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _lapcore as _compiled
    except ImportError:  # extension not built
        log.debug("compiled assignment core unavailable; using fallback")

BACKEND = "compiled" if _compiled is not None else "python"


def _kernel(backend):
    if backend is None:
        backend = BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled assignment core is not available")
        return _compiled.solve_rect
    if backend == "python":
        return _lap_py.solve_rect
    raise ValueError(f"unknown backend {backend!r}")


def linear_sum_assignment(cost, backend=None):
    """Minimum-cost assignment on a (possibly rectangular) cost matrix.

    Returns ``(rows, cols)`` index arrays sorted by row, of length
    ``min(cost.shape)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d array")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    nr, nc = cost.shape
    if nr == 0 or nc == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    solve = _kernel(backend)
    if nr <= nc:
        # shift so all reduced costs start nonnegative; does not change argmin
        col4row = solve(np.ascontiguousarray(cost - cost.min()))
        return np.arange(nr, dtype=np.intp), np.asarray(col4row, dtype=np.intp)
    col4row = solve(np.ascontiguousarray((cost - cost.min()).T))
    rows = np.asarray(col4row, dtype=np.intp)
    cols = np.arange(nc, dtype=np.intp)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]
