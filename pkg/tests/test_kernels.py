"""The numba and numpy kernels must agree bit for bit."""

import numpy as np
import pytest

from lsw import kernels, ops

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba backend not active")

CASES = [
    ((2, 3, 4, 8, 8), (2, 3, 3), (1, 1, 1)),
    ((1, 5, 2, 9, 7), (2, 3, 3), (1, 2, 2)),
    ((3, 2, 3, 6, 6), (1, 2, 3), (2, 1, 3)),
]


@pytest.mark.parametrize("shape,kernel,stride", CASES)
def test_im2col_col2im_agree(shape, kernel, stride):
    rng = np.random.default_rng(sum(shape))
    xp = rng.standard_normal(shape).astype(np.float32)
    out = ops.conv_output_shape(shape[2:], kernel, stride, (0, 0, 0))
    a = kernels.im2col_numpy(xp, kernel, stride, out)
    b = kernels.im2col_numba(xp, kernel, stride, out)
    assert a.dtype == b.dtype == np.float64
    assert np.array_equal(a, b)

    dcols = rng.standard_normal(a.shape)
    ga = kernels.col2im_numpy(dcols, shape, kernel, stride, out)
    gb = kernels.col2im_numba(dcols, shape, kernel, stride, out)
    assert np.array_equal(ga, gb)


@pytest.mark.parametrize("shape,window,stride", CASES)
def test_maxpool_kernels_agree(shape, window, stride):
    rng = np.random.default_rng(len(shape) + shape[-1])
    # small integer values force plenty of ties
    x = rng.integers(0, 4, shape).astype(np.float64)
    out = ops.pool_output_shape(shape[2:], window, stride)
    va, ia = kernels.maxpool_forward_numpy(x, window, stride, out)
    vb, ib = kernels.maxpool_forward_numba(x, window, stride, out)
    assert np.array_equal(va, vb)
    assert np.array_equal(ia, ib)

    g = rng.standard_normal(va.shape)
    assert np.array_equal(kernels.maxpool_backward_numpy(g, ia, shape), kernels.maxpool_backward_numba(g, ib, shape))


def test_dispatch_matches_backend():
    assert kernels.im2col is kernels.im2col_numba
    assert kernels.BACKEND == "numba"


def _backend_probe(value):
    import os
    import subprocess
    import sys

    env = dict(os.environ, LSW_BACKEND=value)
    code = "import lsw.kernels as k; print(k.BACKEND, k.im2col.__name__)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)


def test_env_flag_selects_numpy_backend():
    r = _backend_probe("numpy")
    assert r.returncode == 0
    assert r.stdout.split() == ["numpy", "im2col_numpy"]


def test_env_flag_rejects_unknown_backend():
    r = _backend_probe("cuda")
    assert r.returncode != 0 and "LSW_BACKEND" in r.stderr
