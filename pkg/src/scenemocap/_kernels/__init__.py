"""Hot geometric kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports cleanly; setting
``SCENEMOCAP_PURE_PYTHON=1`` forces the numpy implementation.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("SCENEMOCAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

capsule_inside_counts = _impl.capsule_inside_counts
nearest_sq = _impl.nearest_sq


def available_backends():
    """Map backend name -> kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


__all__ = ["BACKEND", "capsule_inside_counts", "nearest_sq", "available_backends"]
