"""Kernel backend selection.

The compiled extension is used when it imports; setting ``SUPEROU_PURE_PYTHON=1``
forces the pure-Python fallback. ``BACKEND`` names the active choice.
"""

import os

from . import _pykernels

try:
    if os.environ.get("SUPEROU_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

ADVANCE_DONE = _pykernels.ADVANCE_DONE
ADVANCE_PENDING = _pykernels.ADVANCE_PENDING
ADVANCE_SWITCH = _pykernels.ADVANCE_SWITCH

advance_particles = _impl.advance_particles
sync_particles = _impl.sync_particles


def field_evolve(*args, **kwargs):
    dim = kwargs["dim"] if "dim" in kwargs else args[14]
    if dim == 1:
        return _impl.field_evolve(*args, **kwargs)
    return _pykernels.field_evolve(*args, **kwargs)


def backends():
    """Available kernel modules by name, for benchmarking and cross-checks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
