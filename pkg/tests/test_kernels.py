import os
import subprocess
import sys

import numpy as np
import pytest

from cellinspect import kernels

needs_numba = pytest.mark.skipif("numba" not in kernels.available_backends(), reason="numba missing")


def _cases(rng):
    x = rng.normal(size=(2, 6, 8, 3))
    x[0, 0, 0, 0] = x[0, 0, 1, 0] = 5.0   # a tie
    _, arg = kernels.maxpool_forward_numpy(x)
    gray = rng.integers(0, 4, (9, 7)).astype(np.float64)   # many equal neighbours
    mag = rng.uniform(0, 1, (16, 24))
    ang = rng.uniform(0, 180, (16, 24))
    ang[0, :3] = [0.0, 179.999, 90.0]
    return {
        "maxpool_forward": (x,),
        "maxpool_backward": (rng.normal(size=(2, 3, 4, 3)), arg),
        "col2im": (rng.normal(size=(2, 4, 5, 3, 3, 3)), (2, 6, 7, 3), 1),
        "lbp_codes": (gray,),
        "hog_cells": (mag, ang, 8, 9),
    }


@needs_numba
@pytest.mark.parametrize("name", ["maxpool_forward", "maxpool_backward", "col2im", "lbp_codes", "hog_cells"])
def test_backends_agree(rng, name):
    args = _cases(rng)[name]
    a = kernels.get_kernel(name, "numpy")(*args)
    b = kernels.get_kernel(name, "numba")(*args)
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        assert u.dtype == v.dtype
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_window_gather(rng):
    from numpy.lib.stride_tricks import sliding_window_view

    xp = rng.normal(size=(1, 7, 6, 2))
    for stride in (1, 2):
        view = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
        d = rng.normal(size=view.shape)
        lhs = np.sum(view * d)
        rhs = np.sum(xp * kernels.col2im_numpy(d, xp.shape, stride))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def _backend_in_subprocess(value):
    env = dict(os.environ, CELLINSPECT_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "from cellinspect import kernels; print(kernels.BACKEND)"],
                          env=env, capture_output=True, text=True)


def test_env_flag_selects_backend():
    r = _backend_in_subprocess("numpy")
    assert r.returncode == 0 and r.stdout.strip() == "numpy"
    r = _backend_in_subprocess("fortran")
    assert r.returncode != 0 and "CELLINSPECT_BACKEND" in r.stderr


def test_numpy_backend_runs_engine():
    code = ("import numpy as np; from cellinspect import kernels, build_structure;"
            "net = build_structure('s3', 2, input_side=16, fc=(4, 4), dtype=np.float64);"
            "x = np.random.default_rng(0).uniform(size=(2, 16, 16, 3));"
            "v, g = net.loss_and_grads(x, [0, 1], 1e-3, train=False);"
            "print(kernels.BACKEND, repr(v))")
    outs = {}
    for backend in kernels.available_backends():
        r = subprocess.run([sys.executable, "-c", code], env=dict(os.environ, CELLINSPECT_BACKEND=backend),
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        name, value = r.stdout.split()
        assert name == backend
        outs[backend] = float(value)
    assert len(set(outs.values())) == 1
