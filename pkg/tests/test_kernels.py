import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcva import kernels

numba_only = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


@numba_only
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 9]),
       st.integers(0, 2 ** 32 - 1))
def test_crop_paths_agree(n, h, w, size, seed):
    rng = np.random.default_rng(seed)
    maps = rng.normal(size=(n, h, w))
    centers = rng.uniform(-3, max(h, w) + 3, size=(n, 2))
    np.testing.assert_allclose(kernels.crop_forward_numba(maps, centers, size),
                               kernels.crop_forward_numpy(maps, centers, size), rtol=1e-13, atol=1e-14)
    g = rng.normal(size=(n, size, size))
    np.testing.assert_allclose(kernels.crop_backward_numba(g, centers, size, h, w),
                               kernels.crop_backward_numpy(g, centers, size, h, w), rtol=1e-12, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2 ** 32 - 1))
def test_crop_backward_is_adjoint_of_forward(n, h, w, seed):
    rng = np.random.default_rng(seed)
    maps = rng.normal(size=(n, h, w))
    centers = rng.uniform(-2, max(h, w) + 2, size=(n, 2))
    g = rng.normal(size=(n, 3, 3))
    lhs = np.sum(kernels.crop_forward(maps, centers, 3) * g)
    rhs = np.sum(maps * kernels.crop_backward(g, centers, 3, h, w))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@numba_only
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 3), st.integers(1, 4),
       st.integers(0, 2 ** 32 - 1))
def test_col2im_paths_agree(c, k2, stride, n, ho, seed):
    k = 2 * k2 - 1
    rng = np.random.default_rng(seed)
    gcols = rng.normal(size=(c, k, k, n, ho, ho))
    hp = (ho - 1) * stride + k
    np.testing.assert_allclose(kernels.col2im_numba(gcols, stride, hp, hp),
                               kernels.col2im_numpy(gcols, stride, hp, hp), rtol=1e-13, atol=1e-13)


@numba_only
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_donor_paths_agree(h, w, c, seed):
    rng = np.random.default_rng(seed)
    visible = rng.random((h * w, c)) < 0.5
    yy, xx = np.divmod(np.arange(h * w), w)
    coords = np.stack([yy, xx], axis=1)
    np.testing.assert_array_equal(kernels.nearest_donors_numba(visible, coords),
                                  kernels.nearest_donors_numpy(visible, coords))


@pytest.mark.parametrize("flag,expected", [("0", "False"), ("1", str(kernels.HAVE_NUMBA))])
def test_environment_flag_selects_path(flag, expected):
    import os
    import subprocess
    import sys

    env = dict(os.environ, MCVA_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from mcva import kernels; print(kernels.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == expected
