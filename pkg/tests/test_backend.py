import os
import subprocess
import sys

import numpy as np
import pytest

from segflow import _backend, _kernels_py

try:
    from segflow import _kernels
except ImportError:  # extension not built
    _kernels = None

needs_extension = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def random_mixture(rng, n=50, d=3, J=4, point_components=False):
    x = rng.normal(size=(n, d))
    shift = rng.normal(scale=0.3, size=(n, d))
    w = rng.dirichlet(np.ones(J))
    means = rng.normal(size=(J, d))
    variances = rng.uniform(0.05, 1.0, size=(J, d))
    if point_components:
        variances[0] = 0.0
    return x, shift, np.log(w), means, variances


def test_active_backend_is_reported():
    assert _backend.BACKEND in ("cython", "python")
    if _kernels is not None and not os.environ.get("SEGFLOW_PURE_PYTHON"):
        assert _backend.BACKEND == "cython"


@needs_extension
@pytest.mark.parametrize("t", [1e-3, 0.3, 0.7, 1.0])
@pytest.mark.parametrize("point", [False, True])
def test_velocity_kernels_agree(t, point):
    args = random_mixture(np.random.default_rng(int(t * 1000)), point_components=point)
    x, shift, lw, means, variances = args
    fast = _kernels.gmm_velocity_batch(x, t, shift, lw, means, variances)
    slow = _kernels_py.gmm_velocity_batch(x, t, shift, lw, means, variances)
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


@needs_extension
def test_logpdf_kernels_agree():
    x, shift, lw, means, variances = random_mixture(np.random.default_rng(3))
    fast = _kernels.gmm_logpdf_batch(x, shift, lw, means, variances)
    slow = _kernels_py.gmm_logpdf_batch(x, shift, lw, means, variances)
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


@needs_extension
def test_logpdf_kernels_agree_far_in_the_tail():
    x, shift, lw, means, variances = random_mixture(np.random.default_rng(4), n=5)
    x = x + 40.0
    fast = _kernels.gmm_logpdf_batch(x, shift, lw, means, variances)
    slow = _kernels_py.gmm_logpdf_batch(x, shift, lw, means, variances)
    assert np.all(np.isfinite(fast)) and np.allclose(fast, slow, rtol=1e-12)


def test_environment_variable_forces_fallback():
    env = dict(os.environ, SEGFLOW_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from segflow import _backend; print(_backend.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
