"""Compute backend selection.

Hot kernels (convolution, pooling, bilinear warps) exist twice: a numba
@njit build and a pure-numpy build.  The active backend is chosen once
from the DDMC_BACKEND environment variable and can be overridden at
runtime with set_backend(), which benchmarks and tests use to compare
the two paths on identical inputs.

DDMC_BACKEND values:
    auto   use numba when importable, else numpy (default)
    numba  require numba, raise if unavailable
    numpy  force the pure-numpy path
"""

import os

from .errors import ValidationError

_CHOICES = ("auto", "numba", "numpy")

try:
    import numba  # noqa: F401
    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

_requested = os.environ.get("DDMC_BACKEND", "auto").strip().lower() or "auto"


def numba_available():
    return _HAVE_NUMBA


def set_backend(name):
    """Select the kernel backend: 'auto', 'numba', or 'numpy'."""
    global _requested
    if name not in _CHOICES:
        raise ValidationError(
            "unknown backend %r, expected one of %s" % (name, ", ".join(_CHOICES)))
    _requested = name


def active_backend():
    """Resolve the backend actually used for kernel dispatch."""
    if _requested == "numpy":
        return "numpy"
    if _requested == "numba":
        if not _HAVE_NUMBA:
            raise ValidationError(
                "DDMC_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if _HAVE_NUMBA else "numpy"
