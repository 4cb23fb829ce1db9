"""Hot numerical kernels.

The compiled extension ``_ldl_ext`` is used when it was built; otherwise the
pure-Python module ``_ldl_py`` with the identical interface is selected.  Set
``RATECOLL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _ldl_py

if os.environ.get("RATECOLL_PURE_PYTHON", "") not in ("", "0"):
    ldl = _ldl_py
    BACKEND = "python"
else:
    try:
        from . import _ldl_ext as ldl
        BACKEND = "cython"
    except ImportError:  # extension not built
        ldl = _ldl_py
        BACKEND = "python"

__all__ = ["ldl", "BACKEND", "backends"]


def backends():
    """All importable kernel modules keyed by name."""
    out = {"python": _ldl_py}
    try:
        from . import _ldl_ext
        out["cython"] = _ldl_ext
    except ImportError:
        pass
    return out
