"""Backend selection for the hot kernels.

Set ``GSGRAPH_BACKEND=numpy`` to force the pure-numpy path. The default is
``numba`` when the package imports cleanly, otherwise numpy.
"""
from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

_requested = os.environ.get("GSGRAPH_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"GSGRAPH_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = False
if _requested == "numba":
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        logger.warning("numba not importable, falling back to numpy kernels")

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        import numba

        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
