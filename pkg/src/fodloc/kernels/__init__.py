"""Hot numeric kernels with a numba fast path and a numpy fallback.

The three convolution primitives dominate training time.  ``conv2d_forward``,
``conv2d_input_grad`` and ``conv2d_weight_grad`` dispatch to the backend
selected via :mod:`fodloc.backend` (``FODLOC_BACKEND`` env var).
"""

from .. import backend
from . import numpy_impl

if backend.HAS_NUMBA:
    from . import numba_impl
else:  # pragma: no cover - exercised only on numba-free installs
    numba_impl = None


def _impl():
    if backend.active_backend() == "numba":
        return numba_impl
    return numpy_impl


def conv2d_forward(x, w, b):
    """Same convolution, stride 1, edge-replicate padding:
    (N,Cin,H,W) -> (N,Cout,H,W)."""
    return _impl().conv2d_forward(x, w, b)


def conv2d_input_grad(dy, w):
    """Gradient of conv2d_forward w.r.t. its input."""
    return _impl().conv2d_input_grad(dy, w)


def conv2d_weight_grad(x, dy, kh, kw):
    """Gradient of conv2d_forward w.r.t. the kernel weights."""
    return _impl().conv2d_weight_grad(x, dy, kh, kw)
