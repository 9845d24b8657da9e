"""Hot-loop kernels, compiled when available.

The Cython extension ``mdmt._kernels`` is used if it was built; otherwise the
numpy implementations in ``mdmt._kernels_py`` are used. Setting the
environment variable ``MDMT_PURE_PYTHON=1`` forces the numpy versions.

``BACKEND`` names the active implementation (``"cython"`` or ``"python"``).
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("MDMT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def gather_rows(table, ids):
    return _impl.gather_rows(_c(table), _c(ids, np.int64))


def scatter_add_rows(target, ids, rows):
    """Accumulate ``rows[i]`` into ``target[ids[i]]`` in place (duplicates add up)."""
    if not target.flags.c_contiguous:
        raise ValueError("scatter target must be C-contiguous")
    _impl.scatter_add_rows(target, _c(ids, np.int64), _c(rows, target.dtype))


def layernorm_forward(x, eps):
    """Normalize each row of a 2-D array; returns ``(y, inv_std)``."""
    return _impl.layernorm_forward(_c(x), float(eps))


def layernorm_backward(dy, y, inv_std):
    return _impl.layernorm_backward(_c(dy, y.dtype), _c(y), _c(inv_std, y.dtype))


def ranksum_positive(sorted_scores, sorted_labels):
    return _impl.ranksum_positive(_c(sorted_scores, np.float64), _c(sorted_labels, np.int8))


def use_backend(name):
    """Switch the active implementation; used by the benchmark and backend tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels  # type: ignore[attr-defined]

        _impl, BACKEND = _kernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
