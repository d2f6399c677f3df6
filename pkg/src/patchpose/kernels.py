"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise, or when
``PATCHPOSE_PURE_PYTHON=1`` is set, the numpy reference implementations are
used. ``BACKEND`` records which one is active.
"""
import os

from . import _pykernels

if os.environ.get("PATCHPOSE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

sym3_eigh = _impl.sym3_eigh
compatibility_matrix = _impl.compatibility_matrix
splat_zbuffer = _impl.splat_zbuffer

__all__ = ["BACKEND", "sym3_eigh", "compatibility_matrix", "splat_zbuffer"]
