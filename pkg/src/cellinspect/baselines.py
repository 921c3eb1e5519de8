"""Hand-crafted texture baselines: LBP+HOG and Gabor responses, each fed to
a linear SVM trained by projected subgradient descent (Pegasos)."""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels, modelfile
from .dataset import resize, to_gray

LBP_REGIONS = 12
HOG_CELL = 8
HOG_BLOCK = 2
HOG_BINS = 9
HOG_EPS = 1e-6
GABOR_SIZE = 31
GABOR_SCALES = 5
GABOR_ORIENTATIONS = 8
GABOR_SIDE = 10


# ---------------------------------------------------------------------------
# LBP / HOG
# ---------------------------------------------------------------------------

def lbp_codes(gray):
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 3:
        raise ValueError("LBP needs a 2-D image of at least 3 x 3")
    return kernels.lbp_codes(gray)


def lbp_features(gray, regions=LBP_REGIONS):
    """Concatenated per-region 256-bin LBP histograms, each summing to 1."""
    codes = lbp_codes(gray)
    h, w = codes.shape
    if h < regions or w < regions:
        raise ValueError(f"image smaller than the {regions} x {regions} region grid")
    ys = np.linspace(0, h, regions + 1).astype(int)
    xs = np.linspace(0, w, regions + 1).astype(int)
    # region id per pixel, then one bincount for the whole grid
    ry = np.searchsorted(ys, np.arange(h), side="right") - 1
    rx = np.searchsorted(xs, np.arange(w), side="right") - 1
    rid = ry[:, None] * regions + rx[None, :]
    hist = np.bincount((rid * 256 + codes).ravel(), minlength=regions * regions * 256)
    hist = hist.reshape(regions * regions, 256).astype(np.float64)
    hist /= hist.sum(axis=1, keepdims=True)
    return hist.ravel()


def _gradients(gray):
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
    return gx, gy


def hog_cells(gray, cell=HOG_CELL, nbins=HOG_BINS):
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    if h % cell or w % cell:
        raise ValueError(f"HOG needs dimensions that are multiples of {cell}, got {h}x{w}")
    gx, gy = _gradients(gray)
    mag = np.hypot(gx, gy)
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    return kernels.hog_cells(mag, ang, cell, nbins)


def hog_features(gray, cell=HOG_CELL, block=HOG_BLOCK, nbins=HOG_BINS, eps=HOG_EPS):
    """Cell histograms grouped into overlapping block x block blocks (one-cell
    step), each block L2-normalised."""
    cells = hog_cells(gray, cell, nbins)
    ch, cw, _ = cells.shape
    if ch < block or cw < block:
        raise ValueError("image too small for one HOG block")
    blocks = sliding_window_view(cells, (block, block), axis=(0, 1))  # (bh, bw, nbins, b, b)
    blocks = blocks.transpose(0, 1, 3, 4, 2).reshape(ch - block + 1, cw - block + 1, -1)
    norm = np.sqrt(np.sum(blocks ** 2, axis=-1, keepdims=True) + eps ** 2)
    return (blocks / norm).ravel()


def lbp_hog_features(img, side=256):
    """LBP and HOG descriptors of the grayscale image resized to side x side."""
    gray = to_gray(resize(img, side, dtype=np.float64) * 255.0)
    return np.concatenate([lbp_features(gray), hog_features(gray)])


# ---------------------------------------------------------------------------
# Gabor
# ---------------------------------------------------------------------------

@dataclass
class GaborBank:
    kernels: np.ndarray          # (scales * orientations, size, size)
    scale: np.ndarray
    orientation: np.ndarray
    wavelengths: tuple
    thetas: tuple

    def __len__(self):
        return len(self.kernels)


def gabor_kernel(size, wavelength, theta, sigma=None, gamma=0.5):
    """Even-symmetric real Gabor kernel with its DC component removed and unit L2 norm."""
    sigma = 0.56 * wavelength if sigma is None else sigma
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    g = np.exp(-(xr ** 2 + (gamma * yr) ** 2) / (2 * sigma ** 2)) * np.cos(2 * np.pi * xr / wavelength)
    g -= g.mean()
    return g / np.linalg.norm(g)


def build_gabor_bank(size=GABOR_SIZE, scales=GABOR_SCALES, orientations=GABOR_ORIENTATIONS):
    wavelengths = tuple(4.0 * np.sqrt(2.0) ** s for s in range(scales))
    thetas = tuple(k * np.pi / orientations for k in range(orientations))
    ks, si, oi = [], [], []
    for s, lam in enumerate(wavelengths):
        for o, th in enumerate(thetas):
            ks.append(gabor_kernel(size, lam, th))
            si.append(s)
            oi.append(o)
    return GaborBank(np.stack(ks), np.array(si), np.array(oi), wavelengths, thetas)


def filter_same(gray, bank_kernels, mode="symmetric"):
    """Correlate ``gray`` with every kernel; output keeps the input size.

    Borders are mirrored rather than zero-filled, so a constant image gives
    exactly zero response with zero-mean kernels.
    """
    k = bank_kernels.shape[-1]
    r = k // 2
    p = np.pad(np.asarray(gray, dtype=np.float64), r, mode=mode)
    win = sliding_window_view(p, (k, k))
    return np.einsum("yxij,nij->nyx", win, bank_kernels, optimize=True)


def area_resize(gray, side):
    """Box-filter downsample by exact fractional pixel overlap."""
    gray = np.asarray(gray, dtype=np.float64)

    def weights(n):
        edges = np.linspace(0, n, side + 1)
        lo, hi = edges[:-1, None], edges[1:, None]
        px = np.arange(n)[None, :]
        ov = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0, None)
        return ov / ov.sum(axis=1, keepdims=True)

    return weights(gray.shape[0]) @ gray @ weights(gray.shape[1]).T


def gabor_responses(img, bank, side=GABOR_SIDE):
    """|response| of the 10 x 10 grayscale thumbnail to every kernel (40 * 100 values)."""
    img = np.asarray(img)
    gray = to_gray(img) if img.ndim == 3 else np.asarray(img, dtype=np.float64)
    thumb = area_resize(gray, side)
    return np.abs(filter_same(thumb, bank.kernels)).ravel()


@dataclass
class PcaReducer:
    """Principal-component projection keeping a fraction of total variance."""
    energy: float = 0.9
    mean: np.ndarray = None
    basis: np.ndarray = None
    eigenvalues: np.ndarray = None
    retained_fraction: float = None

    @property
    def fitted(self):
        return self.basis is not None

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        if not 0 < self.energy <= 1:
            raise ValueError("energy ratio must be in (0, 1]")
        if X.shape[0] < 2:
            raise ValueError("PCA needs at least two samples")
        self.mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean, full_matrices=False)
        ev = s ** 2 / (X.shape[0] - 1)
        nonzero = int(np.sum(ev > ev[0] * 1e-10)) if ev[0] > 0 else 0
        if nonzero == 0:
            raise ValueError("training features have zero variance")
        ev = ev[:nonzero]
        frac = np.cumsum(ev) / ev.sum()
        k = min(int(np.searchsorted(frac, self.energy - 1e-12)) + 1, nonzero)
        self.basis = vt[:k]
        self.eigenvalues = ev
        self.retained_fraction = float(frac[k - 1])
        return self

    def transform(self, X):
        if not self.fitted:
            raise RuntimeError("reducer not fitted")
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T


def gabor_features(img, bank, reducer, fit=False):
    """Gabor magnitudes for one image (or a list of images) projected by the
    reducer.  With ``fit=True`` the reducer is fitted on these images first."""
    imgs = [img] if np.asarray(img).ndim <= 3 and not isinstance(img, list) else list(img)
    raw = np.stack([gabor_responses(i, bank) for i in imgs])
    if fit:
        reducer.fit(raw)
    elif not reducer.fitted:
        raise RuntimeError("reducer not fitted; pass fit=True on the training split")
    out = reducer.transform(raw)
    return out[0] if len(imgs) == 1 and not isinstance(img, list) else out


# ---------------------------------------------------------------------------
# linear SVM
# ---------------------------------------------------------------------------

@dataclass
class SvmHyper:
    lam: float = 1e-4
    iterations: int = 2000
    batch_size: int = 16
    seed: int = 0


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    lam: float
    iterations: int
    seed: int
    reducer: PcaReducer = None
    descriptor: str = "raw"
    meta: dict = field(default_factory=dict)


def hinge_objective(w, b, X, y, lam):
    margins = y * (X @ w + b)
    return 0.5 * lam * (w @ w + b * b) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def svm_train(X, y, hyper=None, trace=False):
    """Pegasos on the bias-augmented features: step 1/(lam t), mini-batch
    subgradient of the hinge loss, projection onto the 1/sqrt(lam) ball.

    Labels must be +1/-1 with both present.  With ``trace`` also returns the
    objective after every step.
    """
    hyper = hyper or SvmHyper()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x d with one label per row")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise ValueError("SVM training needs both classes")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(d + 1)
    lam = hyper.lam
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(hyper.seed)
    bs = min(hyper.batch_size, n)
    history = []
    for t in range(1, hyper.iterations + 1):
        idx = rng.choice(n, size=bs, replace=False)
        xb, yb = Xa[idx], y[idx]
        viol = yb * (xb @ w) < 1.0
        eta = 1.0 / (lam * t)
        w *= 1.0 - eta * lam
        if viol.any():
            w += (eta / bs) * (yb[viol] @ xb[viol])
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        if trace:
            history.append(hinge_objective(w[:-1], w[-1], X, y, lam))
    model = SvmModel(w[:-1].copy(), float(w[-1]), lam, hyper.iterations, hyper.seed)
    return (model, np.array(history)) if trace else model


def svm_predict(model, f):
    """(label, margin) for one feature vector, or arrays for a matrix."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != model.w.shape[0]:
        raise ValueError(f"feature length {f.shape[-1]} != model dimension {model.w.shape[0]}")
    margin = f @ model.w + model.b
    label = np.where(margin >= 0, 1, -1)
    if np.ndim(margin) == 0:
        return int(label), float(margin)
    return label, margin


# ---------------------------------------------------------------------------
# end-to-end pipelines and persistence
# ---------------------------------------------------------------------------

class SvmPipeline:
    """Feature extraction plus linear SVM; ``method`` is ``svm-lbphog`` or ``svm-gabor``."""

    def __init__(self, method, side=256, energy=0.9, hyper=None):
        if method not in ("svm-lbphog", "svm-gabor"):
            raise ValueError(f"unknown SVM pipeline {method!r}")
        self.method = method
        self.side = side
        self.energy = energy
        self.hyper = hyper or SvmHyper()
        self.bank = build_gabor_bank() if method == "svm-gabor" else None
        self.reducer = PcaReducer(energy) if method == "svm-gabor" else None
        self.model = None
        self.scale = None

    def _raw(self, images):
        if self.method == "svm-lbphog":
            return np.stack([lbp_hog_features(im, self.side) for im in images])
        return np.stack([gabor_responses(im, self.bank) for im in images])

    def features(self, images, fit=False):
        raw = self._raw(images)
        if self.reducer is not None:
            if fit:
                self.reducer.fit(raw)
            raw = self.reducer.transform(raw)
        if fit:
            # one global scale so the Pegasos radius is meaningful
            self.scale = float(np.sqrt(np.mean(np.sum(raw ** 2, axis=1)))) or 1.0
        return raw / self.scale

    def fit(self, images, labels):
        """``labels`` are +1 (defect) / -1 (good)."""
        X = self.features(images, fit=True)
        self.model = svm_train(X, labels, self.hyper)
        self.model.reducer = self.reducer
        self.model.descriptor = self.method
        return self

    def decision(self, images):
        if self.model is None:
            raise RuntimeError("pipeline not trained")
        return svm_predict(self.model, self.features(images))[1]

    def save(self, path, run_config=None):
        tensors = {"w": self.model.w, "b": np.array([self.model.b])}
        if self.reducer is not None:
            tensors["pca.mean"] = self.reducer.mean
            tensors["pca.basis"] = self.reducer.basis
        meta = {"side": self.side, "energy": self.energy, "scale": self.scale,
                "lam": self.hyper.lam, "iterations": self.hyper.iterations,
                "batch_size": self.hyper.batch_size, "seed": self.hyper.seed,
                "run_config": run_config or {}}
        modelfile.write(path, self.method, 2, meta, tensors)

    @classmethod
    def load(cls, path):
        arch, _, meta, t = modelfile.read(path)
        if arch not in ("svm-lbphog", "svm-gabor"):
            raise modelfile.ModelFileError(f"model file holds {arch!r}, not an SVM pipeline")
        hyper = SvmHyper(meta["lam"], meta["iterations"], meta["batch_size"], meta["seed"])
        p = cls(arch, side=meta["side"], energy=meta["energy"], hyper=hyper)
        p.scale = meta["scale"]
        if p.reducer is not None:
            p.reducer.mean = t["pca.mean"].astype(np.float64)
            p.reducer.basis = t["pca.basis"].astype(np.float64)
        p.model = SvmModel(t["w"].astype(np.float64), float(t["b"][0]), hyper.lam, hyper.iterations,
                           hyper.seed, p.reducer, arch)
        p.run_config = meta.get("run_config", {})
        return p
