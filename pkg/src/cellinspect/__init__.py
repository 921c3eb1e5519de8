"""Surface-defect inspection for solar-cell images.

A from-scratch numpy CNN engine (numba kernels with a numpy fallback), the
single-branch and multispectral networks, a slide-splitting dataset
pipeline, LBP/HOG and Gabor SVM baselines, and a k-fold evaluation harness.
"""

from .architectures import build, build_mscnn, build_structure, load_model, save_model
from .dataset import CLASSES, slide_split, stratified_kfold
from .evaluation import confusion, crossval, prf, roc_points
from .nn import Hyper, Network, fit
from .synth import SynthSpec, synth_generate

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "Hyper", "Network", "SynthSpec", "build", "build_mscnn", "build_structure", "confusion",
    "crossval", "fit", "load_model", "prf", "roc_points", "save_model", "slide_split", "stratified_kfold",
    "synth_generate",
]
