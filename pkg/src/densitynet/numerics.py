"""Dense numerics for the layer set used by the density models.

Activations are plain ``numpy.ndarray`` values. Image tensors are stored
channel-major, ``(channels, batch, height, width)``: with that layout every
im2col row is a run of contiguous image rows and the convolution GEMM writes
its result straight into the next layer's layout. Dense tensors are
``(batch, features)``. Convolution weights are ``(out, in, k, k)`` and fully
connected weights ``(in_features, units)`` so that ``y = x @ W + b``.

The pure entry points work in float64. The cached variants keep whatever
dtype they are given, which lets training run in float32.

``forward``/``backward`` are the pure per-layer entry points. Training code
uses ``forward_cached``/``backward_cached`` to avoid recomputing the im2col
matrix and pooling indices between the two passes.
"""

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LAYER_KINDS = ("conv", "maxpool", "relu", "fullyconnected", "softmax", "globalavgpool")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class NonFiniteGradientError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    units: int = 0
    in_features: int = 0
    padding: str = "valid"
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.stride < 1:
            raise ValueError(f"{self.label}: stride must be positive")
        if self.kind == "conv":
            if min(self.kernel, self.in_channels, self.out_channels) < 1:
                raise ValueError(f"{self.label}: conv needs positive kernel and channel counts")
        elif self.kind == "maxpool":
            if self.kernel < 1:
                raise ValueError(f"{self.label}: maxpool needs a positive window")
        elif self.kind == "fullyconnected":
            if min(self.units, self.in_features) < 1:
                raise ValueError(f"{self.label}: fully connected needs positive in_features and units")

    @property
    def label(self):
        return self.name or self.kind

    def param_shapes(self):
        if self.kind == "conv":
            return OrderedDict(
                W=(self.out_channels, self.in_channels, self.kernel, self.kernel),
                b=(self.out_channels,),
            )
        if self.kind == "fullyconnected":
            return OrderedDict(W=(self.in_features, self.units), b=(self.units,))
        return OrderedDict()

    def output_shape(self, input_shape):
        """Shape produced from ``input_shape`` (batch axis included)."""
        input_shape = tuple(input_shape)
        if self.kind in ("relu", "softmax"):
            return input_shape
        if self.kind == "fullyconnected":
            features = int(np.prod(input_shape[1:]))
            if features != self.in_features:
                raise ShapeError(
                    f"{self.label}: expected {self.in_features} input features, got {features}"
                    f" from shape {input_shape}"
                )
            return (input_shape[0], self.units)
        if len(input_shape) != 4:
            raise ShapeError(f"{self.label}: expected a 4-d (C, N, H, W) input, got shape {input_shape}")
        c, n, h, w = input_shape
        if self.kind == "globalavgpool":
            return (n, c)
        if self.kind == "conv":
            if c != self.in_channels:
                raise ShapeError(f"{self.label}: expected {self.in_channels} input channels, got {c}")
            if self.padding == "same":
                return (self.out_channels, n, -(-h // self.stride), -(-w // self.stride))
            if h < self.kernel or w < self.kernel:
                raise ShapeError(f"{self.label}: {self.kernel}x{self.kernel} kernel does not fit a {h}x{w} input")
            return (self.out_channels, n, (h - self.kernel) // self.stride + 1,
                    (w - self.kernel) // self.stride + 1)
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"{self.label}: {self.kernel}x{self.kernel} window does not fit a {h}x{w} input")
        return (c, n, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)


def conv(kernel, in_channels, out_channels, stride=1, padding="valid", name=""):
    return LayerSpec("conv", kernel=kernel, stride=stride, in_channels=in_channels,
                     out_channels=out_channels, padding=padding, name=name)


def maxpool(kernel, stride=None, name=""):
    return LayerSpec("maxpool", kernel=kernel, stride=stride or kernel, name=name)


def relu(name=""):
    return LayerSpec("relu", name=name)


def fullyconnected(in_features, units, name=""):
    return LayerSpec("fullyconnected", in_features=in_features, units=units, name=name)


def softmax(name=""):
    return LayerSpec("softmax", name=name)


def globalavgpool(name=""):
    return LayerSpec("globalavgpool", name=name)


# ---------------------------------------------------------------------------
# layer math

def _same_pad(layer, h, w):
    out_h, out_w = -(-h // layer.stride), -(-w // layer.stride)
    pad_h = max((out_h - 1) * layer.stride + layer.kernel - h, 0)
    pad_w = max((out_w - 1) * layer.stride + layer.kernel - w, 0)
    return (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def _offset(i, n, s):
    return slice(i, i + (n - 1) * s + 1, s)


def _im2col(x, k, s, oh, ow):
    # rows ordered (c, ki, kj), columns ordered (n, h, w)
    c, n = x.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, _offset(i, oh, s), _offset(j, ow, s)]
    return cols.reshape(c * k * k, n * oh * ow)


def _conv_forward(layer, params, x):
    out_shape = layer.output_shape(x.shape)
    pads = None
    if layer.padding == "same":
        pads = _same_pad(layer, x.shape[2], x.shape[3])
        x = np.pad(x, ((0, 0), (0, 0), pads[0], pads[1]))
    f, n, oh, ow = out_shape
    cols = _im2col(x, layer.kernel, layer.stride, oh, ow)
    out = params["W"].reshape(f, -1) @ cols
    out += params["b"][:, None]
    return out.reshape(out_shape), (cols, x.shape, pads)


def _conv_backward(layer, params, cache, grad_out, need_input_grad):
    cols, padded_shape, pads = cache
    W = params["W"]
    f, c, k, _ = W.shape
    s = layer.stride
    _, n, oh, ow = grad_out.shape
    g2 = grad_out.reshape(f, -1)
    grads = {"W": (g2 @ cols.T).reshape(W.shape), "b": g2.sum(axis=1)}
    if not need_input_grad:
        return None, grads
    dcols = (W.reshape(f, -1).T @ g2).reshape(c, k, k, n, oh, ow)
    dx = np.zeros(padded_shape, dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, _offset(i, oh, s), _offset(j, ow, s)] += dcols[:, i, j]
    if pads is not None:
        (t, b_), (l, r) = pads
        dx = dx[:, :, t : dx.shape[2] - b_, l : dx.shape[3] - r]
    return dx, grads


def _pool_slices(layer, x, oh, ow):
    k, s = layer.kernel, layer.stride
    return [x[:, :, _offset(i, oh, s), _offset(j, ow, s)] for i in range(k) for j in range(k)]


def _maxpool_forward(layer, x):
    """Max over each window plus the row-major index of its first maximum."""
    _, _, oh, ow = layer.output_shape(x.shape)
    taps = _pool_slices(layer, x, oh, ow)
    if len(taps) == 4:
        # 2x2 tournament; strict '>' keeps the earlier tap on ties
        second = taps[1] > taps[0]
        top = np.maximum(taps[0], taps[1])
        fourth = taps[3] > taps[2]
        bottom = np.maximum(taps[2], taps[3])
        lower_wins = bottom > top
        idx = np.where(lower_wins, 2 + fourth.view(np.int8), second.view(np.int8))
        return np.maximum(top, bottom), (idx, x.shape)
    best = taps[0].copy()
    idx = np.zeros(best.shape, dtype=np.int32)
    for t, cand in enumerate(taps[1:], start=1):
        np.copyto(idx, t, where=cand > best)
        np.maximum(best, cand, out=best)
    return best, (idx, x.shape)


def _maxpool_backward(layer, cache, grad_out):
    idx, in_shape = cache
    _, _, oh, ow = grad_out.shape
    k, s = layer.kernel, layer.stride
    dx = np.zeros(in_shape, dtype=grad_out.dtype)
    for t in range(k * k):
        i, j = divmod(t, k)
        target = dx[:, :, _offset(i, oh, s), _offset(j, ow, s)]
        if s >= k:
            np.multiply(grad_out, idx == t, out=target)
        else:
            # overlapping windows can route several entries to one location
            target += grad_out * (idx == t)
    return dx


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_cached(layer, params, x):
    """Forward pass returning ``(output, cache)`` for ``backward_cached``."""
    kind = layer.kind
    if kind == "relu":
        y = np.maximum(x, 0.0)
        return y, y
    if kind == "softmax":
        p = _softmax(x)
        return p, p
    _check_params(layer, params)
    out_shape = layer.output_shape(x.shape)
    if kind == "fullyconnected":
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["W"] + params["b"], (flat, x.shape)
    if kind == "conv":
        return _conv_forward(layer, params, x)
    if kind == "maxpool":
        return _maxpool_forward(layer, x)
    if kind == "globalavgpool":
        return x.mean(axis=(2, 3)).T.copy(), x.shape
    raise AssertionError(kind)


def backward_cached(layer, params, cache, grad_out, need_input_grad=True):
    kind = layer.kind
    if kind == "relu":
        return grad_out * (cache > 0), {}
    if kind == "softmax":
        p = cache
        return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True)), {}
    if kind == "fullyconnected":
        flat, in_shape = cache
        grads = {"W": flat.T @ grad_out, "b": grad_out.sum(axis=0)}
        dx = (grad_out @ params["W"].T).reshape(in_shape) if need_input_grad else None
        return dx, grads
    if kind == "conv":
        return _conv_backward(layer, params, cache, grad_out, need_input_grad)
    if kind == "maxpool":
        return _maxpool_backward(layer, cache, grad_out), {}
    if kind == "globalavgpool":
        c, n, h, w = cache
        return np.broadcast_to(grad_out.T[:, :, None, None] / (h * w), cache).copy(), {}
    raise AssertionError(kind)


def forward(layer, params, x):
    """Apply ``layer`` to ``x``. ``params`` holds ``W``/``b`` for parametric layers."""
    x = np.asarray(x, dtype=np.float64)
    return forward_cached(layer, params, x)[0]


def backward(layer, params, x, grad_out):
    """Return ``(input_gradient, parameter_gradients)`` for ``layer`` at input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_params(layer, params)
    expected = layer.output_shape(x.shape)
    if tuple(grad_out.shape) != tuple(expected):
        raise ShapeError(
            f"{layer.label}: upstream gradient has shape {grad_out.shape}, forward output is {expected}"
        )
    _, cache = forward_cached(layer, params, x)
    return backward_cached(layer, params, cache, grad_out)


def _check_params(layer, params):
    for key, shape in layer.param_shapes().items():
        if params is None or key not in params:
            raise ShapeError(f"{layer.label}: missing parameter {key!r}")
        if tuple(params[key].shape) != shape:
            raise ShapeError(f"{layer.label}: parameter {key} has shape {params[key].shape}, expected {shape}")


def cross_entropy(probabilities, true_class):
    """Negative log-likelihood of ``true_class``; batched when ``probabilities`` is 2-d.

    For a batch the per-sample losses are returned (callers take the mean).
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(true_class)
    n_classes = p.shape[-1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise IndexError(f"class index out of range for {n_classes} classes: {true_class}")
    if p.ndim == 1:
        return float(-np.log(max(p[int(y)], PROB_FLOOR)))
    picked = p[np.arange(len(y)), y]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def cross_entropy_grad(probabilities, true_class):
    """Gradient of the mean batch cross-entropy with respect to ``probabilities``."""
    p = np.asarray(probabilities)
    y = np.asarray(true_class)
    g = np.zeros_like(p)
    rows = np.arange(len(y))
    g[rows, y] = -1.0 / (np.maximum(p[rows, y], PROB_FLOOR) * len(y))
    return g


# ---------------------------------------------------------------------------
# parameters and optimisation

class ParamSet:
    """Ordered named weight tensors together with their Adam state."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict()
        self.m = OrderedDict()
        self.v = OrderedDict()
        self.step = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.tensors[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def slice(self, prefix):
        """Parameters stored as ``prefix.<key>``, keyed by ``<key>``."""
        plen = len(prefix) + 1
        return {name[plen:]: t for name, t in self.tensors.items() if name.startswith(prefix + ".")}

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self):
        out = ParamSet()
        for name, t in self.tensors.items():
            out.tensors[name] = t.copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out


def adam_step(params, gradients, learning_rate, inplace=False):
    """One Adam update; returns the updated ParamSet.

    Parameters missing from ``gradients`` are treated as having zero gradient.
    """
    for name, g in gradients.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    out = params if inplace else params.copy()
    out.step += 1
    t = out.step
    for name in out.names():
        g = gradients.get(name)
        m, v = out.m[name], out.v[name]
        m *= ADAM_BETA1
        v *= ADAM_BETA2
        if g is not None:
            m += (1.0 - ADAM_BETA1) * g
            v += (1.0 - ADAM_BETA2) * g * g
        # bias-corrected update; written so that a zero moment leaves the weight exactly unchanged
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        out.tensors[name] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


def fans(shape):
    shape = tuple(shape)
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    raise ValueError(f"cannot infer fan-in/fan-out for shape {shape}")


def glorot_init(shape, rng):
    """Uniform Glorot/Xavier initialisation."""
    fan_in, fan_out = fans(shape)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_layer_params(layer, rng):
    out = OrderedDict()
    for key, shape in layer.param_shapes().items():
        out[key] = glorot_init(shape, rng) if key == "W" else np.zeros(shape)
    return out


# ---------------------------------------------------------------------------
# verification

@dataclass
class GradientCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


class GradientCheckReport(list):
    @property
    def passed(self):
        return all(e.passed for e in self)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self), default=0.0)

    def failures(self):
        return [e for e in self if not e.passed]


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / (|a| + |n|), with the denominator floored for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def gradient_check(loss_and_grads, params, tolerance=1e-4, eps=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads(tensors)`` maps a name->array dict to ``(loss, grads)``.
    ``params`` is a ParamSet or a plain dict; it is restored after probing.
    With ``max_entries`` only that many randomly chosen entries of each
    parameter are probed.
    """
    tensors = params.tensors if isinstance(params, ParamSet) else params
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_and_grads(tensors)
    report = GradientCheckReport()
    for name, value in tensors.items():
        flat = value.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            probe = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            probe = np.arange(flat.size)
        numeric = np.empty(len(probe))
        for out_i, idx in enumerate(probe):
            orig = flat[idx]
            flat[idx] = orig + eps
            plus, _ = loss_and_grads(tensors)
            flat[idx] = orig - eps
            minus, _ = loss_and_grads(tensors)
            flat[idx] = orig
            numeric[out_i] = (plus - minus) / (2 * eps)
        err = float(relative_error(analytic[probe], numeric).max()) if len(probe) else 0.0
        report.append(GradientCheckEntry(name, err, len(probe), err < tolerance))
    return report


def check_layer(layer, params, x, rng, tolerance=1e-4, eps=1e-5, max_entries=None):
    """Finite-difference check of one layer, input gradient included.

    The scalar probed is ``sum(forward(x) * R)`` for a fixed random ``R`` so
    every output entry contributes with a distinct weight.
    """
    tensors = OrderedDict(x=np.array(x, dtype=np.float64))
    for key, value in (params or {}).items():
        tensors[key] = np.array(value, dtype=np.float64)
    out_shape = layer.output_shape(tensors["x"].shape)
    projection = rng.normal(size=out_shape)

    def loss_and_grads(t):
        p = {k: v for k, v in t.items() if k != "x"}
        y, cache = forward_cached(layer, p, t["x"])
        dx, dp = backward_cached(layer, p, cache, projection)
        grads = dict(dp)
        grads["x"] = dx
        return float(np.sum(y * projection)), grads

    return gradient_check(loss_and_grads, tensors, tolerance=tolerance, eps=eps,
                          max_entries=max_entries, rng=rng)


# ---------------------------------------------------------------------------
# NTW weight container

NTW_MAGIC = b"NTWEIGHT"


class NTWFormatError(ValueError):
    pass


def save_ntw(path, tensors):
    """Write name->array tensors as an NTW container (little-endian float64 payload)."""
    if isinstance(tensors, ParamSet):
        tensors = tensors.tensors
    header = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        header.append({"name": name, "shape": list(np.shape(value)), "byte_offset": offset})
        chunks.append(data)
        offset += len(data)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NTW_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for chunk in chunks:
            fh.write(chunk)


def load_ntw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != NTW_MAGIC:
        raise NTWFormatError(f"{path}: bad magic, not an NTW weight file")
    if len(blob) < 12:
        raise NTWFormatError(f"{path}: truncated header length")
    (head_len,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NTWFormatError(f"{path}: unreadable JSON header ({exc})") from None
    payload = memoryview(blob)[12 + head_len :]
    out = OrderedDict()
    for entry in header:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + 8 * count
        if end > len(payload):
            raise NTWFormatError(f"{path}: payload too short for tensor {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return out
