"""The numba kernels and their pure-numpy fallbacks must agree exactly."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwseg import _accel

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8), st.integers(1, 200))
def test_projection_backends_agree(seed, K, n):
    r = np.random.default_rng(seed)
    V = r.normal(scale=float(r.choice([0.1, 1.0, 5.0])), size=(n, K))
    # exercise exact ties as well
    V[: n // 4] = np.round(V[: n // 4], 1)
    s = r.integers(0, K, n)
    a = _accel.project_compatible_rows_numpy(V, s)
    b = _accel.project_compatible_rows_numba(V, s)
    assert np.allclose(a, b, atol=1e-13, rtol=0)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40), st.integers(2, 5))
def test_quadform_backends_agree(seed, n, K):
    r = np.random.default_rng(seed)
    m = int(r.integers(1, 3 * n))
    e = np.sort(r.integers(0, n, size=(m, 2)), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    w = r.random(len(e))
    Y = r.random((K, n))
    assert _accel.edge_quadform_numba(e, w, Y) == pytest.approx(
        _accel.edge_quadform_numpy(e, w, Y), rel=1e-12, abs=1e-14)


def test_simplex_rows_numpy():
    V = np.array([[0.2, 0.2], [3.0, 0.0], [-1.0, -1.0], [0.5, 0.25]])
    P = _accel.simplex_rows_numpy(V)
    assert np.allclose(P, [[0.5, 0.5], [1.0, 0.0], [0.5, 0.5], [0.625, 0.375]])


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, RWSEG_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from rwseg import _accel; print(_accel.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_backend_name():
    assert _accel.BACKEND in ("numba", "numpy")
    assert (_accel.BACKEND == "numba") == _accel.USE_NUMBA
