"""Network builders: the three candidate single-branch structures (s1, s2,
s3), the three-branch multispectral network (ms), and model persistence."""

import numpy as np

from . import modelfile
from .nn import Conv2D, Dense, Dropout, Flatten, MaxPool2D, Network, ReLU, Sequential, softmax

# (filters, kernel, pool-after) per conv layer
STRUCTURES = {
    "s1": [(16, 3, True), (32, 3, True), (64, 3, True)],
    "s2": [(16, 3, True), (32, 3, False), (32, 3, True), (64, 3, False), (64, 3, True)],
    "s3": [(16, 7, True), (32, 5, False), (32, 5, True), (64, 3, False), (64, 3, True)],
}
ARCH_IDS = ("s1", "s2", "s3", "ms")
DEFAULT_FC = (256, 128)


def _branch(structure, in_ch, rng, dtype):
    layers = []
    for filters, k, pool in structure:
        layers += [Conv2D(in_ch, filters, k, rng=rng, dtype=dtype), ReLU()]
        if pool:
            layers.append(MaxPool2D())
        in_ch = filters
    return Sequential(layers)


def _head(fan_in, fc, n_classes, dropout, rng, dtype):
    layers = [Flatten()]
    for width in fc:
        layers += [Dense(fan_in, width, rng=rng, dtype=dtype), ReLU(), Dropout(dropout)]
        fan_in = width
    layers.append(Dense(fan_in, n_classes, rng=rng, dtype=dtype))
    return Sequential(layers)


def _check_classes(n_classes):
    if n_classes not in (2, 7):
        raise ValueError(f"class count must be 2 or 7, got {n_classes}")


def build_structure(arch, n_classes=2, input_side=256, fc=DEFAULT_FC, dropout=0.5, seed=0,
                    dtype=np.float32, in_channels=3, input_offset=0.5):
    """Single-branch network ``s1``, ``s2`` or ``s3`` on input_side^2 x 3 input."""
    arch = arch.lower()
    if arch not in STRUCTURES:
        raise ValueError(f"unknown structure {arch!r}; expected one of s1, s2, s3")
    _check_classes(n_classes)
    rng = np.random.default_rng(seed)
    branch = _branch(STRUCTURES[arch], in_channels, rng, dtype)
    feat = branch.output_shape((input_side, input_side, in_channels))
    head = _head(int(np.prod(feat)), fc, n_classes, dropout, rng, dtype)
    config = {"input_side": input_side, "fc": list(fc), "dropout": dropout, "seed": seed,
              "input_offset": input_offset}
    return Network([branch], head, n_classes, arch=arch, input_shape=(input_side, input_side, in_channels),
                   config=config, input_offset=input_offset)


def build_mscnn(n_classes=2, input_side=256, fc=DEFAULT_FC, dropout=0.5, seed=0, dtype=np.float32,
                input_offset=0.5):
    """Three s3 branches fed by the R, G and B planes, concatenated before a
    shared FC head."""
    _check_classes(n_classes)
    rng = np.random.default_rng(seed)
    branches = [_branch(STRUCTURES["s3"], 1, rng, dtype) for _ in range(3)]
    h, w, c = branches[0].output_shape((input_side, input_side, 1))
    head = _head(h * w * c * 3, fc, n_classes, dropout, rng, dtype)
    config = {"input_side": input_side, "fc": list(fc), "dropout": dropout, "seed": seed,
              "input_offset": input_offset}
    return Network(branches, head, n_classes, arch="ms", split_input=True,
                   input_shape=(input_side, input_side, 3), config=config, input_offset=input_offset)


def build(arch, n_classes=2, **kw):
    if arch == "ms":
        return build_mscnn(n_classes, **kw)
    return build_structure(arch, n_classes, **kw)


def concat_features(a, b, c):
    """Stack three equally sized feature maps along the channel axis (R, G, B)."""
    a, b, c = (np.asarray(t) for t in (a, b, c))
    if not (a.shape[:-1] == b.shape[:-1] == c.shape[:-1]):
        raise ValueError("feature maps must share spatial dimensions")
    return np.concatenate([a, b, c], axis=-1)


def forward_classify(net, image, mode="eval", rng=None):
    """Class probabilities for one H x W x 3 image (or a batch)."""
    image = np.asarray(image)
    expected = net.input_shape
    if expected is not None and tuple(image.shape[-3:]) != expected:
        raise ValueError(f"image shape {image.shape} does not match {expected}")
    mode = mode.lower()
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "train" and rng is None:
        rng = np.random.default_rng()
    probs = softmax(net.forward(image, train=(mode == "train"), rng=rng))
    net.clear_caches()
    return probs[0] if image.ndim == 3 else probs


def conv_param_count(net, branch=None):
    """Parameters held by convolution layers (optionally one branch only)."""
    total = 0
    for name, p in net.params().items():
        if ".conv." in name and (branch is None or name.startswith(f"branch{branch}.")):
            total += p.size
    return total


def save_model(net, path, run_config=None):
    meta = {"config": net.config, "run_config": run_config or {}}
    modelfile.write(path, net.arch, net.n_classes, meta, net.params())


def load_model(path):
    arch, n_classes, meta, tensors = modelfile.read(path)
    if arch not in ARCH_IDS:
        raise modelfile.ModelFileError(f"model file holds {arch!r}, not a CNN")
    cfg = meta["config"]
    net = build(arch, n_classes, input_side=cfg["input_side"], fc=tuple(cfg["fc"]),
                dropout=cfg["dropout"], seed=cfg["seed"], input_offset=cfg.get("input_offset", 0.5))
    expected = net.params()
    if set(expected) != set(tensors):
        raise modelfile.ModelFileError("tensor names do not match the architecture")
    for name, t in tensors.items():
        if t.shape != expected[name].shape:
            raise modelfile.ModelFileError(f"tensor {name} has shape {t.shape}, expected {expected[name].shape}")
    net.set_params(tensors)
    net.run_config = meta.get("run_config", {})
    return net
