"""Selection of the compute backend for the hot convolution kernels.

Two interchangeable implementations exist: a numba ``@njit`` one and a pure
numpy (im2col) one.  The active backend is chosen once at import time from the
``FODLOC_BACKEND`` environment variable:

* ``auto`` (default) - numba when importable, numpy otherwise
* ``numba``          - force numba, raise if it cannot be imported
* ``numpy``          - force the pure numpy fallback

``set_backend`` switches at runtime (used by the tests and the benchmark).
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_VALID = ("auto", "numba", "numpy")
_active = None


def _resolve(name):
    if name not in _VALID:
        raise ValueError(f"FODLOC_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("FODLOC_BACKEND=numba but numba is not installed")
    return name


def active_backend():
    """Name of the backend currently in use ('numba' or 'numpy')."""
    global _active
    if _active is None:
        _active = _resolve(os.environ.get("FODLOC_BACKEND", "auto"))
    return _active


def set_backend(name):
    """Switch backend at runtime; returns the previously active name."""
    global _active
    previous = active_backend()
    _active = _resolve(name)
    return previous
