import numpy as np
import pytest

from fodloc import backend, kernels
from fodloc.kernels import numpy_impl

if backend.HAS_NUMBA:
    from fodloc.kernels import numba_impl
else:  # pragma: no cover
    numba_impl = None

needs_numba = pytest.mark.skipif(not backend.HAS_NUMBA, reason="numba not installed")


def _random_problem(rng, dtype, n=2, c_in=3, c_out=5, h=11, w=13, k=3):
    x = rng.standard_normal((n, c_in, h, w)).astype(dtype)
    w_ = (rng.standard_normal((c_out, c_in, k, k)) * 0.2).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype)
    dy = rng.standard_normal((n, c_out, h, w)).astype(dtype)
    return x, w_, b, dy


@needs_numba
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_backend_parity(rng, dtype, tol):
    x, w, b, dy = _random_problem(rng, dtype)
    for fn in ("conv2d_forward", "conv2d_input_grad", "conv2d_weight_grad"):
        if fn == "conv2d_forward":
            a = numba_impl.conv2d_forward(x, w, b)
            c = numpy_impl.conv2d_forward(x, w, b)
        elif fn == "conv2d_input_grad":
            a = numba_impl.conv2d_input_grad(dy, w)
            c = numpy_impl.conv2d_input_grad(dy, w)
        else:
            a = numba_impl.conv2d_weight_grad(x, dy, 3, 3)
            c = numpy_impl.conv2d_weight_grad(x, dy, 3, 3)
        scale = max(1.0, np.abs(c).max())
        assert np.abs(a - c).max() / scale < tol, fn


def test_forward_against_naive_loops(rng):
    x, w, b, _ = _random_problem(rng, np.float64, n=1, c_in=2, c_out=3, h=6, w=5)
    # naive same-conv with edge-replicate padding
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    want = np.zeros((n, co, h, wd))
    for f in range(co):
        for y in range(h):
            for xx in range(wd):
                acc = b[f]
                for c in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            yy = min(max(y + ky - 1, 0), h - 1)
                            xi = min(max(xx + kx - 1, 0), wd - 1)
                            acc += w[f, c, ky, kx] * x[0, c, yy, xi]
                want[0, f, y, xx] = acc
    got = kernels.conv2d_forward(x, w, b)
    assert np.abs(got - want).max() < 1e-12


def test_backend_selection_roundtrip():
    original = backend.active_backend()
    try:
        prev = backend.set_backend("numpy")
        assert backend.active_backend() == "numpy"
        assert prev == original
        with pytest.raises(ValueError):
            backend.set_backend("gpu")
    finally:
        backend.set_backend(original)


def test_numpy_backend_used_when_selected(rng):
    original = backend.active_backend()
    try:
        backend.set_backend("numpy")
        x, w, b, _ = _random_problem(rng, np.float32)
        got = kernels.conv2d_forward(x, w, b)
        want = numpy_impl.conv2d_forward(x, w, b)
        assert np.array_equal(got, want)
    finally:
        backend.set_backend(original)
