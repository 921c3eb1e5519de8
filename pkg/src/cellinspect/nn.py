"""Minimal layer engine: convolution, pooling, ReLU, dense, dropout, softmax
cross-entropy with an L2 penalty, and plain SGD.

Tensors are numpy arrays in NHWC layout.  Functional forms accept a single
H x W x C sample as well; they add and strip the batch axis.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels


class NumericalError(ArithmeticError):
    """Raised when training produces a non-finite loss."""


@dataclass
class Hyper:
    step_size: float = 1e-4
    l2: float = 5e-4
    dropout: float = 0.5
    batch_size: int = 32
    iterations: int = 10000
    seed: int = 0
    reduction: str = "sum"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected H x W x C or N x H x W x C, got shape {x.shape}")
    return x, False


def same_padding(size, k, stride):
    """(out, pad_before, pad_after) for zero SAME padding along one axis."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def _im2col(x, k, stride):
    n, h, w, c = x.shape
    ho, ph0, ph1 = same_padding(h, k, stride)
    wo, pw0, pw1 = same_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    view = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = view.reshape(n * ho * wo, c * k * k)
    return cols, xp.shape, (ph0, pw0), (ho, wo)


def conv2d_forward(x, kernels_, bias, stride=1):
    """SAME-padded cross-correlation.  ``kernels_`` is outC x inC x k x k."""
    x, single = _batched(x)
    out_c, in_c, k, k2 = kernels_.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernels must be square with odd extent")
    if x.shape[-1] != in_c:
        raise ValueError(f"input has {x.shape[-1]} channels, kernels expect {in_c}")
    if min(x.shape) < 1:
        raise ValueError("input dimensions must be positive")
    if stride < 1:
        raise ValueError("stride must be positive")
    cols, _, _, (ho, wo) = _im2col(x, k, stride)
    y = cols @ kernels_.reshape(out_c, -1).T + bias
    y = y.reshape(x.shape[0], ho, wo, out_c)
    return y[0] if single else y


def maxpool2d_forward(x):
    """2x2 stride-2 max pooling; odd extents are padded so output is ceil(H/2)."""
    x, single = _batched(x)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError("pooling window larger than input")
    if h % 2 or w % 2:
        fill = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else np.iinfo(x.dtype).min
        x = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)), constant_values=fill)
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x))
    return (out[0], arg[0]) if single else (out, arg)


def relu(x):
    x = np.asarray(x)
    return np.where(x >= 0, x, np.zeros((), dtype=x.dtype))


def fc_forward(x, weights, bias):
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"input length {x.shape[-1]} != fan-in {weights.shape[1]}")
    return x @ weights.T + bias


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout.  Returns (output, keep-mask)."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    x = np.asarray(x)
    if not train or rate == 0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = rng.random(x.shape) >= rate
    return x * mask.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate)), mask


def softmax(logits):
    z = np.asarray(logits)
    if z.shape[-1] == 0:
        raise ValueError("softmax of empty input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def l2_penalty(params, l2):
    return l2 * sum(float(np.sum(np.square(p, dtype=np.float64))) for p in params.values())


def loss(probs, label, params=None, l2=0.0):
    """Negative log-likelihood of ``label`` plus ``l2 * sum ||theta||^2``.

    ``probs`` may be one distribution or a batch (then ``label`` is an array
    and the data term is the batch mean).
    """
    probs = np.asarray(probs)
    labels = np.atleast_1d(np.asarray(label))
    p2 = probs.reshape(-1, probs.shape[-1])
    if labels.shape[0] != p2.shape[0]:
        raise ValueError("one label per distribution required")
    if np.any(labels < 0) or np.any(labels >= p2.shape[-1]):
        raise ValueError("label out of range")
    picked = p2[np.arange(len(labels)), labels].astype(np.float64)
    data = float(np.mean(-np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    return data + (l2_penalty(params, l2) if params else 0.0)


def sgd_step(params, grads, step_size):
    """In-place ``theta -= step_size * grad`` for every named parameter."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        p -= p.dtype.type(step_size) * g.astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def _need_cache(self):
        if self.cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a cached forward pass")
        return self.cache

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.cache = None
        return self


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, k, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel extent must be odd")
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_ch * k * k))
        self.params["W"] = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {x.shape[-1]}")
        cols, padded, pads, (ho, wo) = _im2col(x, self.k, self.stride)
        W = self.params["W"]
        y = cols @ W.reshape(self.out_ch, -1).T + self.params["b"]
        self.cache = (cols, padded, pads, x.shape)
        return y.reshape(x.shape[0], ho, wo, self.out_ch)

    def backward(self, dout):
        cols, padded, (ph, pw), in_shape = self._need_cache()
        W = self.params["W"]
        d2 = dout.reshape(-1, self.out_ch)
        self.grads["W"] = (d2.T @ cols).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        n, ho, wo = dout.shape[:3]
        dcols = (d2 @ W.reshape(self.out_ch, -1)).reshape(n, ho, wo, self.in_ch, self.k, self.k)
        dxp = kernels.col2im(dcols, padded, self.stride)
        return dxp[:, ph:ph + in_shape[1], pw:pw + in_shape[2], :]

    def output_shape(self, shape):
        h, w, _ = shape
        return (same_padding(h, self.k, self.stride)[0], same_padding(w, self.k, self.stride)[0], self.out_ch)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        gate = x >= 0
        self.cache = gate
        return x * gate.astype(x.dtype)

    def backward(self, dout):
        return dout * self._need_cache().astype(dout.dtype)


class MaxPool2D(Layer):
    kind = "pool"

    def forward(self, x, train=False, rng=None):
        out, arg = maxpool2d_forward(x)
        self.cache = (arg, x.shape)
        return out

    def backward(self, dout):
        arg, in_shape = self._need_cache()
        dx = kernels.maxpool_backward(np.ascontiguousarray(dout), arg)
        return dx[:, :in_shape[1], :in_shape[2], :]

    def output_shape(self, shape):
        h, w, c = shape
        return (-(-h // 2), -(-w // 2), c)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._need_cache())

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "fc"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = (rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        self.cache = x
        return fc_forward(x, self.params["W"], self.params["b"])

    def backward(self, dout):
        x = self._need_cache()
        self.grads["W"] = dout.T @ x
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"]

    def output_shape(self, shape):
        return (self.n_out,)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        y, mask = dropout_forward(x, self.rate, train, rng)
        scale = 1.0 / (1.0 - self.rate) if train else 1.0
        self.cache = (mask, scale)
        return y

    def backward(self, dout):
        mask, scale = self._need_cache()
        return dout * mask.astype(dout.dtype) * dout.dtype.type(scale)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None, record=None):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train=train, rng=rng)
            if record is not None:
                record.append((i, layer.kind, x))
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


class Network:
    """Branches feeding a shared head.

    With one branch the whole input goes through it.  With ``split_input``
    each branch receives one input channel and branch outputs are stacked
    along the channel axis before the head.  ``input_offset`` is subtracted
    from every input value first (0.5 centres [0, 1] pixels).
    """

    def __init__(self, branches, head, n_classes, arch="custom", split_input=False,
                 input_shape=None, config=None, input_offset=0.0):
        self.input_offset = input_offset
        self.branches = list(branches)
        self.head = head
        self.n_classes = n_classes
        self.arch = arch
        self.split_input = split_input
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.config = dict(config or {})
        self._forwarded = False
        if split_input and self.input_shape is not None and self.input_shape[-1] != len(self.branches):
            raise ValueError("split input needs one branch per channel")

    # -- parameters --------------------------------------------------------

    def _named_layers(self):
        for bi, br in enumerate(self.branches):
            for li, layer in enumerate(br.layers):
                yield f"branch{bi}.{li}.{layer.kind}", layer
        for li, layer in enumerate(self.head.layers):
            yield f"head.{li}.{layer.kind}", layer

    def params(self):
        out = {}
        for prefix, layer in self._named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for prefix, layer in self._named_layers():
            for k in layer.params:
                if k not in layer.grads:
                    raise RuntimeError("gradients not computed; call backward first")
                out[f"{prefix}.{k}"] = layer.grads[k]
        return out

    def set_params(self, values):
        for prefix, layer in self._named_layers():
            for k in layer.params:
                name = f"{prefix}.{k}"
                if values[name].shape != layer.params[k].shape:
                    raise ValueError(f"shape mismatch for {name}")
                layer.params[k] = np.array(values[name], dtype=layer.params[k].dtype)

    def n_params(self, prefix=""):
        return sum(v.size for k, v in self.params().items() if k.startswith(prefix))

    @property
    def dtype(self):
        return next(iter(self.params().values())).dtype

    def astype(self, dtype):
        for _, layer in self._named_layers():
            layer.astype(dtype)
        self._forwarded = False
        return self

    def set_dropout(self, rate):
        for _, layer in self._named_layers():
            if isinstance(layer, Dropout):
                if not 0 <= rate < 1:
                    raise ValueError("dropout rate must be in [0, 1)")
                layer.rate = rate

    def clear_caches(self):
        for _, layer in self._named_layers():
            layer.cache = None
        self._forwarded = False

    # -- passes ------------------------------------------------------------

    def _branch_inputs(self, x):
        if not self.split_input:
            return [x]
        if x.shape[-1] != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} channels, got {x.shape[-1]}")
        return [x[..., i:i + 1] for i in range(len(self.branches))]

    def features(self, x, train=False, rng=None, record=None):
        """Branch outputs, concatenated along channels when there are several."""
        x, _ = _batched(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != {self.input_shape}")
        x = x.astype(self.dtype, copy=False)
        if self.input_offset:
            x = x - self.dtype.type(self.input_offset)
        outs = []
        for bi, (br, xi) in enumerate(zip(self.branches, self._branch_inputs(x))):
            rec = [] if record is not None else None
            outs.append(br.forward(xi, train=train, rng=rng, record=rec))
            if record is not None:
                record[bi] = rec
        self._branch_channels = [o.shape[-1] for o in outs]
        return outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)

    def forward(self, x, train=False, rng=None):
        logits = self.head.forward(self.features(x, train=train, rng=rng), train=train, rng=rng)
        self._forwarded = True
        return logits

    def backward(self, dlogits):
        if not self._forwarded:
            raise RuntimeError("backward called without a cached forward pass")
        dfeat = self.head.backward(dlogits)
        dxs = []
        if len(self.branches) == 1:
            dxs.append(self.branches[0].backward(dfeat))
        else:
            start = 0
            for br, c in zip(self.branches, self._branch_channels):
                dxs.append(br.backward(dfeat[..., start:start + c]))
                start += c
        return dxs[0] if not self.split_input else np.concatenate(dxs, axis=-1)

    def loss_and_grads(self, x, labels, l2=0.0, train=True, rng=None, reduction="mean"):
        """Cross-entropy plus L2 penalty over a batch, and its gradient set.

        ``reduction="mean"`` gives ``mean_t L_t + l2 * ||theta||^2``;
        ``"sum"`` gives ``sum_t (L_t + l2 * ||theta||^2)``, i.e. the same
        objective scaled by the batch size.
        """
        x, _ = _batched(x)
        labels = np.asarray(labels).reshape(-1)
        logits = self.forward(x, train=train, rng=rng)
        probs = softmax(logits)
        params = self.params()
        value = loss(probs, labels, params, l2)
        dlogits = probs.copy()
        dlogits[np.arange(len(labels)), labels] -= 1
        if reduction == "mean":
            scale = 1
            dlogits /= len(labels)
        elif reduction == "sum":
            scale = len(labels)
            value *= scale
        else:
            raise ValueError("reduction must be 'sum' or 'mean'")
        self.backward(dlogits.astype(self.dtype, copy=False))
        grads = self.grads()
        if l2:
            grads = {k: g + self.dtype.type(2 * l2 * scale) * params[k] for k, g in grads.items()}
        return value, grads

    def predict_proba(self, x, batch_size=16):
        x, single = _batched(x)
        out = []
        for s in range(0, x.shape[0], batch_size):
            out.append(softmax(self.forward(x[s:s + batch_size], train=False)))
        self.clear_caches()
        probs = np.concatenate(out, axis=0)
        return probs[0] if single else probs

    def shape_trace(self, input_shape=None):
        """Per-branch list of (layer kind, output H x W x C) without running data."""
        shape = tuple(input_shape or self.input_shape)
        if self.split_input:
            shape = shape[:-1] + (1,)
        traces = []
        for br in self.branches:
            s, trace = shape, []
            for layer in br.layers:
                s = layer.output_shape(s)
                trace.append((layer.kind, s))
            traces.append(trace)
        return traces


def fit(net, images, labels, hyper, log_every=0, logger=None, callback=None):
    """Mini-batch SGD over ``hyper.iterations`` steps.

    Batches are drawn from seeded per-epoch permutations so identical seeds
    give bit-identical parameters.  ``callback(iteration, net)`` may return
    True to stop early.  Returns the per-step loss history (batch mean).
    """
    images = np.asarray(images)
    labels = np.asarray(labels).reshape(-1)
    n = len(labels)
    if n == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(hyper.seed)
    net.set_dropout(hyper.dropout)
    bs = min(hyper.batch_size, n)
    order, pos = rng.permutation(n), 0
    history = np.empty(hyper.iterations)
    for it in range(hyper.iterations):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        value, grads = net.loss_and_grads(images[idx], labels[idx], hyper.l2, train=True, rng=rng,
                                          reduction=hyper.reduction)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at iteration {it}")
        sgd_step(net.params(), grads, hyper.step_size)
        history[it] = value / (bs if hyper.reduction == "sum" else 1)
        if logger is not None and log_every and (it + 1) % log_every == 0:
            logger.info("iter %d loss %.5f", it + 1, history[it])
        if callback is not None and callback(it + 1, net):
            history = history[:it + 1]
            break
    net.clear_caches()
    return history
