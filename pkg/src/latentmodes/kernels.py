"""Kernel backend selection.

The compiled extension is used when it imports; set
``LATENTMODES_PURE=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("LATENTMODES_PURE") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

jacobi_eigh = _impl.jacobi_eigh
knn_kth_distance = _impl.knn_kth_distance
hog_cells = _impl.hog_cells

__all__ = ["BACKEND", "jacobi_eigh", "knn_kth_distance", "hog_cells"]
