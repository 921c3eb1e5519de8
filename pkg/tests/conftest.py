import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b):
    """Quadruple loop SAME cross-correlation oracle; x is N x H x W x C."""
    n, h, wd, c = x.shape
    oc, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, h, wd, oc), dtype=np.float64)
    for i in range(n):
        for y in range(h):
            for xx in range(wd):
                for o in range(oc):
                    patch = xp[i, y:y + k, xx:xx + k, :].astype(np.float64)
                    out[i, y, xx, o] = np.sum(patch * np.transpose(w[o], (1, 2, 0))) + b[o]
    return out


def rel_err(a, n, floor=1e-8):
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f, arr, eps=1e-5, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (in place)."""
    idx = range(arr.size) if idx is None else idx
    flat = arr.reshape(-1)
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)
