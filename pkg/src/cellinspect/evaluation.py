"""Metrics, ROC, k-fold cross-validation, activation dumps and timing."""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .architectures import build, load_model
from .baselines import SvmHyper, SvmPipeline
from .dataset import CLASSES, DEFECTS, resize, stratified_kfold
from .nn import Hyper, fit

log = logging.getLogger(__name__)

METHODS = ("s1", "s2", "s3", "ms", "svm-lbphog", "svm-gabor")
FOLD_HEADER = ("fold", "defect", "precision", "recall", "f_measure")
SUMMARY_HEADER = ("fold", "accuracy", "precision", "recall", "f_measure")


# ---------------------------------------------------------------------------
# confusion matrix and precision / recall / F
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # row = true class, column = predicted class
    classes: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if tuple(self.classes) != tuple(other.classes):
            raise ValueError("class lists differ")
        return ConfusionMatrix(self.counts + other.counts, self.classes)

    def write_csv(self, path, comment=None):
        with Path(path).open("w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *(int(v) for v in row)])


def confusion(preds, truth, k, classes=None):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape != truth.shape:
        raise ValueError("preds and truth must have equal length")
    for arr in (preds, truth):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"label out of range for {k} classes")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts, tuple(classes) if classes else tuple(str(i) for i in range(k)))


@dataclass
class PrfScores:
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def accuracy(self):
        n = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / n if n else 0.0


def prf_from_counts(tp, fp, fn, tn=0):
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    p = 0.0 if p_undef else tp / (tp + fp)
    r = 0.0 if r_undef else tp / (tp + fn)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PrfScores(p, r, f, int(tp), int(fp), int(fn), int(tn), p_undef, r_undef)


def prf(cm, positive=1):
    """Precision, recall and F for the ``positive`` class of a binary matrix."""
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if c.shape != (2, 2):
        raise ValueError("prf needs a binary confusion matrix")
    neg = 1 - positive
    return prf_from_counts(c[positive, positive], c[neg, positive], c[positive, neg], c[neg, neg])


def one_vs_rest(cm, cls):
    c = cm.counts
    tp = c[cls, cls]
    fp = c[:, cls].sum() - tp
    fn = c[cls, :].sum() - tp
    return prf_from_counts(tp, fp, fn, c.sum() - tp - fp - fn)


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray     # first vertex uses +inf
    auc: float

    def write_csv(self, path, comment=None):
        with Path(path).open("w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, x, y in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def roc_points(scores, truth):
    """Sweep thresholds over distinct scores, high to low; tied scores move
    in one step.  ``truth`` is 1 for the positive (defect) class."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth).reshape(-1).astype(bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have equal length")
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(t)[last]
    fp = np.cumsum(~t)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], auc)


# ---------------------------------------------------------------------------
# models behind one interface
# ---------------------------------------------------------------------------

class CnnClassifier:
    def __init__(self, method, n_classes, hyper, input_side=256, fc=(256, 128)):
        self.method, self.n_classes, self.hyper = method, n_classes, hyper
        self.input_side, self.fc = input_side, tuple(fc)
        self.net = None

    def _tensors(self, images):
        return np.stack([resize(im, self.input_side) for im in images])

    def fit(self, images, labels):
        self.net = build(self.method, self.n_classes, input_side=self.input_side, fc=self.fc,
                         dropout=self.hyper.dropout, seed=self.hyper.seed)
        fit(self.net, self._tensors(images), np.asarray(labels), self.hyper)
        return self

    def predict_proba(self, images):
        return self.net.predict_proba(self._tensors(images))

    def scores(self, images):
        """(predicted labels, defect score)"""
        p = self.predict_proba(images)
        return p.argmax(axis=1), 1.0 - p[:, 0]


class SvmClassifier:
    def __init__(self, method, hyper, input_side=256):
        self.pipeline = SvmPipeline(method, side=input_side, hyper=hyper)

    def fit(self, images, labels):
        self.pipeline.fit(images, np.where(np.asarray(labels) > 0, 1, -1))
        return self

    def scores(self, images):
        margin = self.pipeline.decision(images)
        return (margin >= 0).astype(np.int64), margin


def make_classifier(method, n_classes=2, hyper=None, svm_hyper=None, input_side=256, fc=(256, 128)):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method.startswith("svm"):
        if n_classes != 2:
            raise ValueError("SVM baselines are binary only")
        return SvmClassifier(method, svm_hyper or SvmHyper(seed=(hyper.seed if hyper else 0)), input_side)
    return CnnClassifier(method, n_classes, hyper or Hyper(), input_side, fc)


# ---------------------------------------------------------------------------
# split evaluation and cross-validation
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    rows: list                   # dicts: defect, precision, recall, f_measure, accuracy, tp, fp, fn, tn
    confusion: ConfusionMatrix
    scores: np.ndarray
    preds: np.ndarray
    train_seconds: float


def encode_labels(class_names, n_classes):
    names = np.asarray(class_names)
    if n_classes == 2:
        return (names != "good").astype(np.int64)
    lookup = {c: i for i, c in enumerate(CLASSES)}
    return np.array([lookup[c] for c in names], dtype=np.int64)


def _row(defect, s):
    return {"defect": defect, "precision": s.precision, "recall": s.recall, "f_measure": s.f_measure,
            "accuracy": s.accuracy, "tp": s.tp, "fp": s.fp, "fn": s.fn, "tn": s.tn}


def split_rows(preds, test_names, n_classes=2):
    """Per-defect rows plus the pooled confusion matrix for one scored split.

    Binary mode adds one row per defect class present (that defect against
    the good images only) and an ``all`` row pooling every defect.
    Seven-class mode reports one-vs-rest rows per class plus ``all``
    (micro-averaged, i.e. accuracy).
    """
    test_names = np.asarray(test_names)
    preds = np.asarray(preds)
    truth = encode_labels(test_names, n_classes)
    rows = []
    if n_classes == 2:
        cm = confusion(preds, truth, 2, ("good", "defect"))
        good = test_names == "good"
        for d in DEFECTS:
            sel = good | (test_names == d)
            if not (test_names == d).any():
                continue
            rows.append(_row(d, prf(confusion(preds[sel], truth[sel], 2))))
        rows.append(_row("all", prf(cm)))
    else:
        cm = confusion(preds, truth, n_classes, CLASSES)
        for i, c in enumerate(CLASSES):
            if (truth == i).any():
                rows.append(_row(c, one_vs_rest(cm, i)))
        acc = float(np.trace(cm.counts) / max(cm.total, 1))
        rows.append({"defect": "all", "precision": acc, "recall": acc, "f_measure": acc, "accuracy": acc,
                     "tp": int(np.trace(cm.counts)), "fp": cm.total - int(np.trace(cm.counts)), "fn": 0, "tn": 0})
    return rows, cm


def evaluate_split(clf, train_images, train_names, test_images, test_names, n_classes=2):
    """Train on one split and score the other (rows as in :func:`split_rows`)."""
    t0 = time.perf_counter()
    clf.fit(train_images, encode_labels(np.asarray(train_names), n_classes))
    train_seconds = time.perf_counter() - t0
    preds, scores = clf.scores(test_images)
    rows, cm = split_rows(preds, test_names, n_classes)
    return SplitResult(rows, cm, np.asarray(scores, dtype=np.float64), preds, train_seconds)


@dataclass
class EvalReport:
    experiment: str
    fold_rows: list = field(default_factory=list)    # per fold and defect
    averaged: list = field(default_factory=list)     # per defect, mean over folds
    confusion: ConfusionMatrix = None
    roc: RocCurve = None
    train_seconds: list = field(default_factory=list)
    detect_seconds_per_100: float = None
    run_config: dict = field(default_factory=dict)

    def summary_rows(self):
        out = [dict(r, fold=r["fold"]) for r in self.fold_rows if r["defect"] == "all"]
        avg = next(r for r in self.averaged if r["defect"] == "all")
        return out + [dict(avg, fold="avg")]

    def fold_accuracies(self):
        return np.array([r["accuracy"] for r in self.fold_rows if r["defect"] == "all"])

    def write(self, outdir, comment=None):
        """folds.csv, summary.csv, confusion.csv, roc.csv (if any) and
        timing.csv.  Everything except timing.csv is deterministic."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        fmt = lambda v: f"{v:.6f}"
        with (outdir / "folds.csv").open("w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FOLD_HEADER)
            for r in self.fold_rows + [dict(a, fold="avg") for a in self.averaged]:
                w.writerow([r["fold"], r["defect"], fmt(r["precision"]), fmt(r["recall"]), fmt(r["f_measure"])])
        with (outdir / "summary.csv").open("w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for r in self.summary_rows():
                w.writerow([r["fold"], fmt(r["accuracy"]), fmt(r["precision"]), fmt(r["recall"]), fmt(r["f_measure"])])
        if self.confusion is not None:
            self.confusion.write_csv(outdir / "confusion.csv", comment)
        if self.roc is not None:
            self.roc.write_csv(outdir / "roc.csv", comment)
        with (outdir / "timing.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "train_seconds"])
            for i, s in enumerate(self.train_seconds):
                w.writerow([i, f"{s:.3f}"])
            if self.detect_seconds_per_100 is not None:
                w.writerow(["detect_per_100", f"{self.detect_seconds_per_100:.4f}"])


def average_rows(fold_rows):
    """Arithmetic mean over folds for every defect key."""
    keys = []
    for r in fold_rows:
        if r["defect"] not in keys:
            keys.append(r["defect"])
    out = []
    for d in keys:
        rs = [r for r in fold_rows if r["defect"] == d]
        avg = {"defect": d}
        for m in ("precision", "recall", "f_measure", "accuracy"):
            avg[m] = float(np.mean([r[m] for r in rs]))
        avg["folds"] = len(rs)
        out.append(avg)
    return out


def crossval(method, images, class_names, k=5, seed=0, hyper=None, svm_hyper=None, n_classes=2,
             input_side=256, fc=(256, 128), n_jobs=1, run_config=None, strata=None):
    """K-fold study of one method over in-memory uint8 images.

    Folds are stratified over the class names (or over ``strata`` when
    given); every sample is tested exactly once.  Fold ``i`` trains with
    seed ``hyper.seed + i``.
    """
    class_names = np.asarray(class_names)
    hyper = hyper or Hyper(seed=seed)
    plan = stratified_kfold(class_names if strata is None else strata, k, seed)

    def one(i):
        tr, te = plan.train_indices(i), plan.test_indices(i)
        h = Hyper(**{**hyper.__dict__, "seed": hyper.seed + i})
        sh = svm_hyper or SvmHyper()
        sh = SvmHyper(sh.lam, sh.iterations, sh.batch_size, sh.seed + i)
        clf = make_classifier(method, n_classes, h, sh, input_side, fc)
        log.info("%s fold %d/%d: %d train, %d test", method, i + 1, k, len(tr), len(te))
        return evaluate_split(clf, [images[j] for j in tr], class_names[tr],
                              [images[j] for j in te], class_names[te], n_classes)

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(one, range(k)))
    else:
        results = [one(i) for i in range(k)]

    report = EvalReport(method, run_config=dict(run_config or {}))
    all_scores = np.empty(len(class_names))
    for i, res in enumerate(results):
        for r in res.rows:
            report.fold_rows.append(dict(r, fold=i))
        report.confusion = res.confusion if report.confusion is None else report.confusion + res.confusion
        report.train_seconds.append(res.train_seconds)
        all_scores[plan.test_indices(i)] = res.scores
    report.averaged = average_rows(report.fold_rows)
    if n_classes == 2:
        report.roc = roc_points(all_scores, class_names != "good")
    return report


def load_classifier(path):
    """Trained classifier (CNN or SVM pipeline) from a model file."""
    from . import modelfile

    arch = modelfile.read(path)[0]
    if arch.startswith("svm"):
        clf = SvmClassifier(arch, None)
        clf.pipeline = SvmPipeline.load(path)
        return clf
    net = load_model(path)
    clf = CnnClassifier(arch, net.n_classes, None, net.config["input_side"], net.config["fc"])
    clf.net = net
    return clf


def evaluate_model(clf, images, class_names, n_classes=2, experiment="eval", run_config=None):
    """Single-split report (fold 0) for an already trained classifier."""
    names = np.asarray(class_names)
    preds, scores = clf.scores(images)
    rows, cm = split_rows(preds, names, n_classes)
    report = EvalReport(experiment, [dict(r, fold=0) for r in rows], confusion=cm,
                        run_config=dict(run_config or {}))
    report.averaged = average_rows(report.fold_rows)
    if n_classes == 2 and (names == "good").any() and (names != "good").any():
        report.roc = roc_points(np.asarray(scores, dtype=np.float64), names != "good")
    return report


# ---------------------------------------------------------------------------
# activation maps and timing
# ---------------------------------------------------------------------------

def _layer_outputs(net, x):
    record = {}
    net.features(x[None], train=False, record=record)
    net.clear_caches()
    return record


def activation_dump(net, image, layer, outdir):
    """Write one min-max normalised 8-bit PGM per channel of the first (L1)
    or last (L3) convolution's ReLU output.  Returns the written paths."""
    layer = layer.upper()
    if layer not in ("L1", "L3"):
        raise ValueError("layer must be 'L1' or 'L3'")
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = resize(image, net.input_shape[0])
    record = _layer_outputs(net, image)
    tags = ["R", "G", "B"] if net.split_input else ["rgb"]
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for bi, tag in enumerate(tags):
        relus = [out for _, kind, out in record[bi] if kind == "relu"]
        fmap = (relus[0] if layer == "L1" else relus[-1])[0]
        for c in range(fmap.shape[-1]):
            m = fmap[..., c].astype(np.float64)
            lo, hi = m.min(), m.max()
            g = np.zeros(m.shape, np.uint8) if hi - lo <= 0 else np.rint((m - lo) / (hi - lo) * 255).astype(np.uint8)
            p = outdir / f"{layer}_{tag}_{c:03d}.pgm"
            Image.fromarray(g, "L").save(p)
            paths.append(p)
    return paths


def timing_bench(predict, images, runs=3):
    """Wall-clock for ``predict(images)``; reports the minimum over ``runs``."""
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        predict(images)
        times.append(time.perf_counter() - t0)
    best = max(min(times), 1e-9)
    return {"seconds": best, "per_image": best / max(len(images), 1), "runs": times}


# ---------------------------------------------------------------------------
# multispectral trend benchmark
# ---------------------------------------------------------------------------

def trend_benchmark(methods=("s3", "ms"), seeds=range(5), per_class_train=40, per_class_test=10,
                    side=32, hyper=None, spec_overrides=None):
    """Held-out accuracy/recall of each method on synthetic sets whose defects
    are each strong in one channel only.

    For seed ``s`` the training set is rendered with seed ``100 + s`` and the
    test set with ``200 + s``; good images match the defect total.  Returns
    ``{method: [(accuracy, recall), ...]}`` in seed order.
    """
    from .synth import SynthSpec, synth_generate

    hyper = hyper or Hyper(step_size=3e-4, l2=5e-4, dropout=0.0, batch_size=10, iterations=1500)
    out = {m: [] for m in methods}
    for s in seeds:
        def render(seed, n):
            counts = {"good": n * len(DEFECTS), **{d: n for d in DEFECTS}}
            m, imgs = synth_generate(SynthSpec(counts, size=side, seed=seed, **(spec_overrides or {})))
            return list(imgs), np.array(m.labels)

        tr_x, tr_y = render(100 + s, per_class_train)
        te_x, te_y = render(200 + s, per_class_test)
        for method in methods:
            h = Hyper(**{**hyper.__dict__, "seed": s})
            res = evaluate_split(make_classifier(method, 2, h, input_side=side), tr_x, tr_y, te_x, te_y)
            pooled = next(r for r in res.rows if r["defect"] == "all")
            out[method].append((pooled["accuracy"], pooled["recall"]))
            log.info("trend seed %d %s: accuracy %.3f recall %.3f", s, method, pooled["accuracy"], pooled["recall"])
    return out


STRIDE_HEADER = ("window", "stride", "patches", "defect_patches", "accuracy", "precision", "recall", "f_measure")


def stride_study(windows=(234, 469, 623), method="s3", k=5, seed=0, hyper=None, input_side=32,
                 n_cells=2, cell_side=1868, defects_per_cell=8, fc=(256, 128)):
    """Cross-validate ``method`` on datasets slide-split from the same
    synthetic cells at several window sizes (stride = half the window).

    Returns a list of summary dicts, one per window, using the averaged
    pooled (``all``) row of each report.
    """
    from .synth import stride_dataset

    rows = []
    for w in windows:
        patches, names, _ = stride_dataset(w, n_cells=n_cells, cell_side=cell_side,
                                           defects_per_cell=defects_per_cell, seed=seed)
        strata = np.where(names == "good", "good", "defect")
        rep = crossval(method, patches, names, k=k, seed=seed, hyper=hyper, input_side=input_side,
                       fc=fc, strata=strata)
        avg = next(r for r in rep.averaged if r["defect"] == "all")
        rows.append({"window": w, "stride": (w + 1) // 2, "patches": len(patches),
                     "defect_patches": int((names != "good").sum()),
                     **{m: avg[m] for m in ("accuracy", "precision", "recall", "f_measure")}})
    return rows


def write_stride_summary(rows, path, comment=None):
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STRIDE_HEADER)
        for r in rows:
            w.writerow([r["window"], r["stride"], r["patches"], r["defect_patches"],
                        *(f"{r[m]:.6f}" for m in ("accuracy", "precision", "recall", "f_measure"))])
