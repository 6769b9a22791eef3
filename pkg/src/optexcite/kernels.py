"""Kernel backend selection.

The compiled extension is used when it was built; set
``OPTEXCITE_PURE_PYTHON=1`` to force the numpy fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("OPTEXCITE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"

linear_recurrence = _impl.linear_recurrence
lti_rk4_batch = _impl.lti_rk4_batch
single_track_batch = _impl.single_track_batch


def backends():
    """Available implementations keyed by name (for benchmarks and tests)."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
