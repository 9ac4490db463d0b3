"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``G3DM_PURE_PYTHON=1``) the numpy fallback is used.  Both expose
``knn_segments``, ``gather_max``, ``scatter_add_rows`` and ``segment_max``.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("G3DM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name: str) -> None:
    """Switch backends at runtime (used by the benchmark and cross-checks)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled

        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def knn_segments(x, starts, k):
    """Per-segment kNN; row ``i`` lists neighbours of node ``i`` (self excluded).

    Segments smaller than ``k + 1`` repeat their nearest neighbour to fill the row.
    """
    return _impl.knn_segments(_f64(x), _i64(starts), int(k))


def gather_max(x, nbr):
    return _impl.gather_max(_f64(x), _i64(nbr))


def scatter_add_rows(grad, arg, n_rows):
    return _impl.scatter_add_rows(_f64(grad), _i64(arg), int(n_rows))


def segment_max(x, starts):
    return _impl.segment_max(_f64(x), _i64(starts))
