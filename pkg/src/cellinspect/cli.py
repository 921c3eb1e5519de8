"""Command-line front end.

Usage::

    cellinspect <command> [options]
    cellinspect dataset split --src cell.png --out patches/
    cellinspect crossval --synth 20 --method ms --k 5 --seed 7 --out runs/ms

Every subcommand accepts ``--seed``, ``--deterministic``, ``--out`` and
``--config FILE``.  Config files are flat ``key = value`` text; flags given
on the command line override them.  The resolved run configuration is
embedded in every artifact (model metadata, ``#`` comment lines of CSVs),
minus the output path itself so that repeated runs into different
directories stay byte-identical.

Exit codes: 0 success, 64 unknown command, 65 bad configuration, 70 numeric
failure (non-finite loss), 74 I/O failure.  Failures print one JSON line on
stderr: ``{"error": ..., "exit": ..., "message": ...}``.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import architectures, evaluation
from .architectures import ARCH_IDS, build, save_model
from .baselines import SvmHyper, SvmPipeline
from .dataset import (CLASSES, DEFECTS, ImageFormatError, load_image, read_manifest, resize,
                      scan_class_dirs, split_directory)
from .modelfile import ModelFileError
from .nn import Hyper, NumericalError, fit
from .synth import SynthSpec, synth_generate, write_dataset

log = logging.getLogger("cellinspect")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 64, 65, 70, 74
# keys never embedded in artifacts
_VOLATILE = {"out", "config", "verbose"}


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2."""

    def error(self, message):
        if "invalid choice" in message and ("argument command" in message or "argument action" in message):
            raise CliError(EXIT_USAGE, "unknown_command", message)
        raise CliError(EXIT_CONFIG, "bad_config", message)


def _ints(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    p.add_argument("--deterministic", action="store_const", const=True, default=S,
                   help="single-threaded reference mode")
    p.add_argument("--out", default=S, help="output file or directory")
    p.add_argument("--config", default=S, help="key = value config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_const", const=True, default=S)


def _data_args(p):
    S = argparse.SUPPRESS
    p.add_argument("--manifest", default=S,
                   help="manifest.csv, or a directory holding one or holding per-class folders")
    p.add_argument("--synth", type=int, default=S, help="render N synthetic images per defect class instead")
    p.add_argument("--synth-size", type=int, default=S, help="side of synthetic images (default 64)")
    p.add_argument("--classes", type=int, choices=(2, 7), default=S, help="2 (good/defect) or 7")


def _hyper_args(p):
    S = argparse.SUPPRESS
    p.add_argument("--step-size", type=float, default=S)
    p.add_argument("--l2", type=float, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--iterations", type=int, default=S)
    p.add_argument("--side", type=int, default=S, help="network input side (default 256)")
    p.add_argument("--fc", type=_ints, default=S, help="hidden FC widths, e.g. 256,128")
    p.add_argument("--svm-lambda", type=float, default=S)
    p.add_argument("--svm-iterations", type=int, default=S)


def build_parser():
    S = argparse.SUPPRESS
    parser = _Parser(prog="cellinspect", description="Solar-cell surface defect inspection experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    ds = sub.add_parser("dataset", help="dataset construction")
    dsub = ds.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    dsub.required = True
    p = dsub.add_parser("split", help="slide-split one image or a directory of images")
    _common(p)
    p.add_argument("--src", default=S, help="image file or directory")
    p.add_argument("--window", type=int, default=S)
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--label", choices=CLASSES, default=S, help="class for images outside class folders")
    p = dsub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--per-class", type=int, default=S, help="images per defect class")
    p.add_argument("--good", type=int, default=S, help="good images (default: the defect total)")
    p.add_argument("--size", type=int, default=S)

    p = sub.add_parser("train", help="fit one CNN and write a model file")
    _common(p)
    _data_args(p)
    _hyper_args(p)
    p.add_argument("--method", choices=ARCH_IDS, default=S)

    p = sub.add_parser("baseline", help="fit an SVM pipeline and write a model file")
    _common(p)
    _data_args(p)
    _hyper_args(p)
    p.add_argument("--method", choices=("svm-lbphog", "svm-gabor"), default=S)

    p = sub.add_parser("eval", help="score a trained model on a dataset")
    _common(p)
    _data_args(p)
    p.add_argument("--model", default=S)

    p = sub.add_parser("crossval", help="stratified K-fold study (or stride study with --windows)")
    _common(p)
    _data_args(p)
    _hyper_args(p)
    p.add_argument("--method", choices=evaluation.METHODS, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S, help="parallel folds (ignored with --deterministic)")
    p.add_argument("--windows", type=_ints, default=S, help="stride study window sizes, e.g. 234,469,623")
    p.add_argument("--cells", type=int, default=S, help="synthetic cells for the stride study")
    p.add_argument("--cell-side", type=int, default=S)

    p = sub.add_parser("roc", help="ROC points of a trained model")
    _common(p)
    _data_args(p)
    p.add_argument("--model", default=S)

    p = sub.add_parser("activations", help="dump L1/L3 feature maps as PGM files")
    _common(p)
    p.add_argument("--model", default=S, help="trained model (default: untrained --method network)")
    p.add_argument("--method", choices=ARCH_IDS, default=S)
    p.add_argument("--image", default=S)
    p.add_argument("--layer", choices=("L1", "L3"), default=S)
    p.add_argument("--side", type=int, default=S)

    p = sub.add_parser("bench", help="detection timing, minimum of repeated runs")
    _common(p)
    p.add_argument("--methods", default=S, help="comma-separated method ids")
    p.add_argument("--model", default=S, help="time this model file instead")
    p.add_argument("--images", type=int, default=S, help="batch size to time (default 100)")
    p.add_argument("--runs", type=int, default=S)
    p.add_argument("--side", type=int, default=S)
    return parser


DEFAULTS = {
    "seed": 0, "deterministic": False, "verbose": False, "classes": 2, "synth_size": 64,
    "step_size": 1e-4, "l2": 5e-4, "dropout": 0.5, "batch_size": 32, "iterations": 10000,
    "side": 256, "fc": (256, 128), "svm_lambda": 1e-4, "svm_iterations": 2000,
    "window": 469, "stride": 235, "size": 64, "k": 5, "jobs": 1, "cells": 2, "cell_side": 1868,
    "layer": "L1", "images": 100, "runs": 3, "methods": "s3,ms",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _actions(parser):
    return {a.dest: a for a in parser._actions if a.dest not in ("help",)}


def read_config_file(path):
    """Flat ``key = value`` pairs; ``#`` starts a comment line."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot read config file {path}: {e}")
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, "bad_config", f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(sub_parser, args):
    """defaults < config file < command-line flags."""
    given = {k: v for k, v in vars(args).items()}
    cfg = {k: v for k, v in DEFAULTS.items() if k in _actions(sub_parser)}
    if "config" in given:
        actions = _actions(sub_parser)
        for key, raw in read_config_file(given["config"]).items():
            a = actions.get(key)
            if a is None or key in ("config", "command", "action"):
                raise CliError(EXIT_CONFIG, "bad_config", f"unknown config key {key!r}")
            try:
                if a.const is True:
                    cfg[key] = _bool(raw)
                elif a.type is not None:
                    cfg[key] = a.type(raw)
                else:
                    cfg[key] = raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise CliError(EXIT_CONFIG, "bad_config", f"config key {key!r}: {e}")
            if a.choices is not None and cfg[key] not in a.choices:
                raise CliError(EXIT_CONFIG, "bad_config", f"config key {key!r}: {raw!r} not in {list(a.choices)}")
    cfg.update(given)
    return cfg


def embedded(cfg):
    """Run configuration as stored in artifacts."""
    out = {}
    for k, v in sorted(cfg.items()):
        if k in _VOLATILE:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _comment(cfg):
    return "run_config " + json.dumps(embedded(cfg), sort_keys=True)


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise CliError(EXIT_CONFIG, "bad_config", f"--{k.replace('_', '-')} is required")


def _hyper(cfg):
    return Hyper(step_size=cfg["step_size"], l2=cfg["l2"], dropout=cfg["dropout"],
                 batch_size=cfg["batch_size"], iterations=cfg["iterations"], seed=cfg["seed"])


def _svm_hyper(cfg):
    return SvmHyper(lam=cfg["svm_lambda"], iterations=cfg["svm_iterations"], seed=cfg["seed"])


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_IO, "io", f"{what} not found: {path}")
    return p


def load_data(cfg):
    """(images, class names) from --manifest or --synth."""
    if cfg.get("manifest") is not None:
        p = _existing(cfg["manifest"], "manifest")
        if p.is_dir():
            m = read_manifest(p / "manifest.csv") if (p / "manifest.csv").is_file() else scan_class_dirs(p)
        else:
            m = read_manifest(p)
        if not len(m):
            raise CliError(EXIT_CONFIG, "bad_config", f"dataset {p} is empty")
        return [m.load(i) for i in range(len(m))], np.array(m.labels)
    if cfg.get("synth") is not None:
        n = cfg["synth"]
        counts = {"good": n * len(DEFECTS), **{d: n for d in DEFECTS}}
        m, imgs = synth_generate(SynthSpec(counts, size=cfg["synth_size"], seed=cfg["seed"]))
        return list(imgs), np.array(m.labels)
    raise CliError(EXIT_CONFIG, "bad_config", "give --manifest or --synth")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset_split(cfg):
    _require(cfg, "src", "out")
    src = _existing(cfg["src"], "source")
    m = split_directory(src, cfg["out"], cfg["window"], cfg["stride"], cfg.get("label"), comment=_comment(cfg))
    print(json.dumps({"patches": len(m), "counts": m.counts, "out": str(cfg["out"])}))


def cmd_dataset_synth(cfg):
    _require(cfg, "out", "per_class")
    n = cfg["per_class"]
    counts = {"good": cfg.get("good", n * len(DEFECTS)), **{d: n for d in DEFECTS}}
    spec = SynthSpec(counts, size=cfg["size"], seed=cfg["seed"])
    m, imgs = synth_generate(spec)
    write_dataset(m, imgs, cfg["out"], comment=_comment(cfg))
    print(json.dumps({"images": len(m), "counts": m.counts, "out": str(cfg["out"])}))


def cmd_train(cfg):
    _require(cfg, "method", "out")
    images, names = load_data(cfg)
    hyper = _hyper(cfg)
    net = build(cfg["method"], cfg["classes"], input_side=cfg["side"], fc=tuple(cfg["fc"]),
                dropout=hyper.dropout, seed=hyper.seed)
    x = np.stack([resize(im, cfg["side"]) for im in images])
    y = evaluation.encode_labels(names, cfg["classes"])
    history = fit(net, x, y, hyper, log_every=max(1, hyper.iterations // 10), logger=log)
    save_model(net, cfg["out"], embedded(cfg))
    print(json.dumps({"model": str(cfg["out"]), "final_loss": float(history[-1]), "samples": len(y)}))


def cmd_baseline(cfg):
    _require(cfg, "method", "out")
    if cfg["classes"] != 2:
        raise CliError(EXIT_CONFIG, "bad_config", "SVM baselines are binary only")
    images, names = load_data(cfg)
    pipe = SvmPipeline(cfg["method"], side=cfg["side"], hyper=_svm_hyper(cfg))
    pipe.fit(images, np.where(names == "good", -1, 1))
    pipe.save(cfg["out"], embedded(cfg))
    print(json.dumps({"model": str(cfg["out"]), "samples": len(names)}))


def _model_and_data(cfg):
    _require(cfg, "model")
    clf = evaluation.load_classifier(_existing(cfg["model"], "model"))
    n_classes = clf.net.n_classes if hasattr(clf, "net") else 2
    images, names = load_data(cfg)
    return clf, n_classes, images, names


def cmd_eval(cfg):
    _require(cfg, "out")
    clf, n_classes, images, names = _model_and_data(cfg)
    report = evaluation.evaluate_model(clf, images, names, n_classes, run_config=embedded(cfg))
    report.write(cfg["out"], _comment(cfg))
    _print_summary(report)


def cmd_roc(cfg):
    _require(cfg, "out")
    clf, n_classes, images, names = _model_and_data(cfg)
    if n_classes != 2:
        raise CliError(EXIT_CONFIG, "bad_config", "ROC needs a binary model")
    _, scores = clf.scores(images)
    curve = evaluation.roc_points(np.asarray(scores, dtype=np.float64), names != "good")
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    curve.write_csv(cfg["out"], _comment(cfg))
    print(json.dumps({"auc": curve.auc, "points": len(curve.fpr)}))


def _print_summary(report):
    rows = report.summary_rows()
    print(json.dumps({"experiment": report.experiment,
                      "accuracy": rows[-1]["accuracy"], "precision": rows[-1]["precision"],
                      "recall": rows[-1]["recall"], "f_measure": rows[-1]["f_measure"]}))


def cmd_crossval(cfg):
    _require(cfg, "method", "out")
    hyper = _hyper(cfg)
    jobs = 1 if cfg["deterministic"] else cfg["jobs"]
    if cfg.get("windows"):
        if cfg["method"].startswith("svm"):
            raise CliError(EXIT_CONFIG, "bad_config", "the stride study runs CNN methods only")
        rows = evaluation.stride_study(cfg["windows"], cfg["method"], cfg["k"], cfg["seed"], hyper,
                                       input_side=cfg["side"], n_cells=cfg["cells"],
                                       cell_side=cfg["cell_side"], fc=tuple(cfg["fc"]))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        evaluation.write_stride_summary(rows, out / "stride_summary.csv", _comment(cfg))
        print(json.dumps({"windows": [r["window"] for r in rows], "accuracy": [r["accuracy"] for r in rows]}))
        return
    images, names = load_data(cfg)
    report = evaluation.crossval(cfg["method"], images, names, k=cfg["k"], seed=cfg["seed"], hyper=hyper,
                                 svm_hyper=_svm_hyper(cfg), n_classes=cfg["classes"],
                                 input_side=cfg["side"], fc=tuple(cfg["fc"]), n_jobs=jobs,
                                 run_config=embedded(cfg))
    report.write(cfg["out"], _comment(cfg))
    _print_summary(report)


def cmd_activations(cfg):
    _require(cfg, "image", "out")
    if cfg.get("model") is not None:
        net = architectures.load_model(_existing(cfg["model"], "model"))
    else:
        _require(cfg, "method")
        net = build(cfg["method"], 2, input_side=cfg["side"], seed=cfg["seed"])
    img = load_image(_existing(cfg["image"], "image"))
    paths = evaluation.activation_dump(net, img, cfg["layer"], cfg["out"])
    print(json.dumps({"files": len(paths), "out": str(cfg["out"])}))


def cmd_bench(cfg):
    n, side = cfg["images"], cfg["side"]
    counts = {"good": n}
    _, imgs = synth_generate(SynthSpec(counts, size=max(side, 8), seed=cfg["seed"]))
    rows = []
    if cfg.get("model") is not None:
        clf = evaluation.load_classifier(_existing(cfg["model"], "model"))
        subjects = [(Path(cfg["model"]).name, clf.scores)]
    else:
        subjects = []
        for method in (m.strip() for m in cfg["methods"].split(",") if m.strip()):
            if method not in ARCH_IDS:
                raise CliError(EXIT_CONFIG, "bad_config", f"bench times CNN methods only, got {method!r}")
            net = build(method, 2, input_side=side, seed=cfg["seed"])
            subjects.append((method, lambda ims, net=net: net.predict_proba(np.stack([resize(i, side) for i in ims]))))
    for name, predict in subjects:
        t = evaluation.timing_bench(predict, list(imgs), runs=cfg["runs"])
        rows.append((name, t["seconds"], t["per_image"]))
        log.info("%s: %.3f s per %d images", name, t["seconds"], n)
    if cfg.get("out") is not None:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            fh.write(f"# {_comment(cfg)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "images", "seconds", "per_image"])
            for name, s, per in rows:
                w.writerow([name, n, f"{s:.4f}", f"{per:.6f}"])
    print(json.dumps({name: {"seconds": s, "per_image": per} for name, s, per in rows}))


COMMANDS = {
    ("dataset", "split"): cmd_dataset_split,
    ("dataset", "synth"): cmd_dataset_synth,
    ("train", None): cmd_train,
    ("baseline", None): cmd_baseline,
    ("eval", None): cmd_eval,
    ("crossval", None): cmd_crossval,
    ("roc", None): cmd_roc,
    ("activations", None): cmd_activations,
    ("bench", None): cmd_bench,
}


def _sub_parser(parser, command, action):
    sp = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    if action is None:
        return sp
    return next(a for a in sp._actions if isinstance(a, argparse._SubParsersAction)).choices[action]


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "exit": code, "message": str(message)}), file=sys.stderr)
    return code


def run(argv=None):
    """Run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise CliError(EXIT_USAGE, "unknown_command", "no command given")
        args = parser.parse_args(argv)
        command, action = args.command, getattr(args, "action", None)
        sub = _sub_parser(parser, command, action)
        params = {k: v for k, v in vars(args).items() if k not in ("command", "action")}
        cfg = resolve_config(sub, argparse.Namespace(**params))
        cfg["command"] = command if action is None else f"{command} {action}"
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        COMMANDS[(command, action)](cfg)
        return EXIT_OK
    except CliError as e:
        return _fail(e.code, e.kind, e)
    except NumericalError as e:
        return _fail(EXIT_NUMERIC, "numeric", e)
    except (ModelFileError, ImageFormatError, OSError) as e:
        return _fail(EXIT_IO, "io", e)
    except (ValueError, KeyError) as e:
        return _fail(EXIT_CONFIG, "bad_config", e)


def main():
    sys.exit(run())
