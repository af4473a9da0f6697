"""Kernel backend selection.

``LSW_BACKEND=numba`` (default when numba imports) compiles the hot loops;
``LSW_BACKEND=numpy`` forces the pure-numpy path. The choice is fixed at
import time.
"""

import logging
import os

log = logging.getLogger("lsw")

_requested = os.environ.get("LSW_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"LSW_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = False
if _requested == "numba":
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        log.warning("numba not importable, falling back to numpy kernels")

BACKEND = "numba" if HAVE_NUMBA else "numpy"
