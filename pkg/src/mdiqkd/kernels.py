"""Backend selection for the hot detector-dynamics loop.

The compiled extension is used when it was built; otherwise the pure-Python
version. Set ``MDIQKD_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("MDIQKD_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"

_EMPTY = np.zeros(0, dtype=np.uint8)


def get_backend(name: str | None = None):
    name = name or BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if name == "python":
        return _kernels_py
    raise ValueError(f"unknown backend {name!r}")


def apply_detector_dynamics(raw, period, sep, recovery, span=(np.inf, np.inf), ap_raw=None, backend=None):
    """Apply dead time and afterpulsing to a time-ordered sequence of raw patterns.

    See :func:`mdiqkd._kernels_py.apply_detector_dynamics` for the contract.
    """
    raw = np.ascontiguousarray(raw, dtype=np.uint8)
    ap_raw = _EMPTY if ap_raw is None else np.ascontiguousarray(ap_raw, dtype=np.uint8)
    impl = get_backend(backend)
    return impl.apply_detector_dynamics(
        raw, ap_raw, float(period), float(sep),
        [float(x) for x in recovery], [float(x) for x in span],
    )
