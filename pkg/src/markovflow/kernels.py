"""Kernel backend selection: compiled extension if available, NumPy otherwise.

Set MARKOVFLOW_PURE_PYTHON=1 to force the NumPy fallback (used by the
benchmark and the equivalence tests).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("MARKOVFLOW_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND

thomas_solve = _impl.thomas_solve
fp_propagate = _impl.fp_propagate
euler_paths = _impl.euler_paths


def backends() -> dict:
    """Both implementations, for benchmarks and cross-checks."""
    table = {"numpy": _kernels_py}
    try:
        from . import _kernels

        table["compiled"] = _kernels
    except ImportError:
        pass
    return table
