"""Hot loops shared by the layer engine and the texture descriptors.

Every kernel has a numba implementation and a pure-numpy twin with the same
signature.  The backend is picked once at import time from the
``CELLINSPECT_BACKEND`` environment variable (``numba`` or ``numpy``); when
unset, numba is used if it imports.  Both variants are always importable
under their explicit names so tests and the benchmark can compare them.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested_backend():
    name = os.environ.get("CELLINSPECT_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"CELLINSPECT_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("CELLINSPECT_BACKEND=numba but numba is not installed")
    return name


BACKEND = _requested_backend()


# ---------------------------------------------------------------------------
# col2im: scatter patch gradients back onto the padded input
# ---------------------------------------------------------------------------

def col2im_numpy(dcols, padded_shape, stride):
    """Accumulate ``dcols`` of shape (N, Ho, Wo, C, k, k) into a padded image.

    Inverse (adjoint) of taking a strided sliding-window view.
    """
    n, ho, wo, c, k, _ = dcols.shape
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                dcols[:, :, :, :, i, j]
    return out


def _col2im_loops(dcols, out, stride):
    n, ho, wo, c, k, _ = dcols.shape
    for b in range(n):
        for i in range(k):
            for j in range(k):
                for y in range(ho):
                    yy = y * stride + i
                    for x in range(wo):
                        xx = x * stride + j
                        for ch in range(c):
                            out[b, yy, xx, ch] += dcols[b, y, x, ch, i, j]
    return out


# ---------------------------------------------------------------------------
# 2x2/2 max pooling with recorded argmax
# ---------------------------------------------------------------------------

def maxpool_forward_numpy(x):
    """2x2 stride-2 max pool over NHWC input with even H and W.

    Returns the pooled map and the flat window index (0..3, row-major) of the
    winner; ties go to the first index in scan order.
    """
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(dout, arg):
    n, ho, wo, c = dout.shape
    dwin = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    return dwin.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)


def _maxpool_forward_loops(x, out, arg):
    n, ho, wo, c = out.shape
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    best = x[b, 2 * y, 2 * xx, ch]
                    bi = 0
                    for q in range(1, 4):
                        v = x[b, 2 * y + q // 2, 2 * xx + q % 2, ch]
                        if v > best:
                            best = v
                            bi = q
                    out[b, y, xx, ch] = best
                    arg[b, y, xx, ch] = bi
    return out, arg


def _maxpool_backward_loops(dout, arg, dx):
    n, ho, wo, c = dout.shape
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    q = arg[b, y, xx, ch]
                    dx[b, 2 * y + q // 2, 2 * xx + q % 2, ch] = dout[b, y, xx, ch]
    return dx


# ---------------------------------------------------------------------------
# LBP codes (radius 1, 8 neighbours, edge-replicated border)
# ---------------------------------------------------------------------------

# (dy, dx) for bit 0..7, counter-clockwise from east; nearest-pixel sampling
# of the radius-1 circle lands exactly on the 8-neighbourhood.
LBP_OFFSETS = np.array(
    [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)], dtype=np.int64
)


def lbp_codes_numpy(gray):
    h, w = gray.shape
    p = np.pad(gray, 1, mode="edge")
    center = p[1:-1, 1:-1]
    codes = np.zeros((h, w), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        codes |= (nb >= center).astype(np.uint8) << np.uint8(bit)
    return codes


def _lbp_codes_loops(gray, offsets, codes):
    h, w = gray.shape
    for y in range(h):
        for x in range(w):
            c = gray[y, x]
            code = 0
            for bit in range(8):
                yy = min(max(y + offsets[bit, 0], 0), h - 1)
                xx = min(max(x + offsets[bit, 1], 0), w - 1)
                if gray[yy, xx] >= c:
                    code |= 1 << bit
            codes[y, x] = code
    return codes


# ---------------------------------------------------------------------------
# HOG cell histograms: magnitude-weighted, linearly split between two bins
# ---------------------------------------------------------------------------

def hog_cells_numpy(mag, ang, cell, nbins):
    """Per-cell orientation histograms.

    ``ang`` is the unsigned orientation in degrees [0, 180).  Bin ``b`` is
    centred on ``b * 180 / nbins``; votes are split linearly between the two
    nearest centres, wrapping at 180.
    """
    h, w = mag.shape
    width = 180.0 / nbins
    pos = ang / width
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= nbins
    hi = (lo + 1) % nbins
    cy = np.arange(h) // cell
    cx = np.arange(w) // cell
    ncx = w // cell
    cell_id = (cy[:, None] * ncx + cx[None, :])
    size = (h // cell) * ncx * nbins
    hist = np.bincount((cell_id * nbins + lo).ravel(), weights=(mag * (1.0 - frac)).ravel(), minlength=size)
    hist += np.bincount((cell_id * nbins + hi).ravel(), weights=(mag * frac).ravel(), minlength=size)
    return hist.reshape(h // cell, ncx, nbins)


def _hog_cells_loops(mag, ang, cell, nbins, hist):
    h, w = mag.shape
    width = 180.0 / nbins
    for y in range(h):
        for x in range(w):
            pos = ang[y, x] / width
            lo = int(np.floor(pos))
            frac = pos - lo
            lo = lo % nbins
            hi = (lo + 1) % nbins
            m = mag[y, x]
            hist[y // cell, x // cell, lo] += m * (1.0 - frac)
            hist[y // cell, x // cell, hi] += m * frac
    return hist


# ---------------------------------------------------------------------------
# numba wrappers; same signatures as the numpy versions
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _col2im_jit = njit(cache=True)(_col2im_loops)
    _maxpool_forward_jit = njit(cache=True)(_maxpool_forward_loops)
    _maxpool_backward_jit = njit(cache=True)(_maxpool_backward_loops)
    _lbp_codes_jit = njit(cache=True)(_lbp_codes_loops)
    _hog_cells_jit = njit(cache=True)(_hog_cells_loops)

    def col2im_numba(dcols, padded_shape, stride):
        out = np.zeros(padded_shape, dtype=dcols.dtype)
        return _col2im_jit(np.ascontiguousarray(dcols), out, stride)

    def maxpool_forward_numba(x):
        n, h, w, c = x.shape
        out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
        arg = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
        return _maxpool_forward_jit(np.ascontiguousarray(x), out, arg)

    def maxpool_backward_numba(dout, arg):
        n, ho, wo, c = dout.shape
        dx = np.zeros((n, 2 * ho, 2 * wo, c), dtype=dout.dtype)
        return _maxpool_backward_jit(np.ascontiguousarray(dout), np.ascontiguousarray(arg), dx)

    def lbp_codes_numba(gray):
        codes = np.empty(gray.shape, dtype=np.uint8)
        return _lbp_codes_jit(np.ascontiguousarray(gray), LBP_OFFSETS, codes)

    def hog_cells_numba(mag, ang, cell, nbins):
        h, w = mag.shape
        hist = np.zeros((h // cell, w // cell, nbins), dtype=np.float64)
        return _hog_cells_jit(np.ascontiguousarray(mag, dtype=np.float64),
                              np.ascontiguousarray(ang, dtype=np.float64), cell, nbins, hist)


_IMPLS = {
    "numpy": {
        "col2im": col2im_numpy,
        "maxpool_forward": maxpool_forward_numpy,
        "maxpool_backward": maxpool_backward_numpy,
        "lbp_codes": lbp_codes_numpy,
        "hog_cells": hog_cells_numpy,
    },
}
if HAVE_NUMBA:
    _IMPLS["numba"] = {
        "col2im": col2im_numba,
        "maxpool_forward": maxpool_forward_numba,
        "maxpool_backward": maxpool_backward_numba,
        "lbp_codes": lbp_codes_numba,
        "hog_cells": hog_cells_numba,
    }


def get_kernel(name, backend=None):
    return _IMPLS[backend or BACKEND][name]


def available_backends():
    return sorted(_IMPLS)


col2im = get_kernel("col2im")
maxpool_forward = get_kernel("maxpool_forward")
maxpool_backward = get_kernel("maxpool_backward")
lbp_codes = get_kernel("lbp_codes")
hog_cells = get_kernel("hog_cells")
