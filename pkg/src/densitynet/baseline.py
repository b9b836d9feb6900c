"""Histogram-of-intensity baselines: softmax regression, optionally with a
100-unit rectifier hidden layer."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .common import MAX_INTENSITY, N_CLASSES, VIEWS

VARIANTS = ("linear", "hidden100")
BIN_CANDIDATES = (10, 20, 50, 100)
HIDDEN_UNITS = 100


def view_histogram(pixels, bins):
    """Normalised counts over ``bins`` equal-width bins spanning [0, 65536)."""
    idx = (np.asarray(pixels, dtype=np.int64).ravel() * bins) >> 16
    counts = np.bincount(idx, minlength=bins)
    return counts / idx.size


def extract_features(views, bins):
    """Concatenate per-view histograms in L-CC, R-CC, L-MLO, R-MLO order.

    ``views`` maps view kind to a ViewImage (or raw pixel array).
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    missing = [v for v in VIEWS if v not in views]
    if missing:
        raise KeyError(f"exam is missing views {missing}")
    parts = []
    for v in VIEWS:
        img = views[v]
        parts.append(view_histogram(getattr(img, "pixels", img), bins))
    return np.concatenate(parts)


def features_from_stack(stack, bins):
    """Features for a ``(n_exams, 4, H, W)`` uint16 array, views in standard order."""
    stack = np.asarray(stack)
    n = stack.shape[0]
    idx = (stack.reshape(n, 4, -1).astype(np.int64) * bins) >> 16
    offsets = (np.arange(n)[:, None] * 4 + np.arange(4)[None, :]) * bins
    flat = (idx + offsets[:, :, None]).ravel()
    counts = np.bincount(flat, minlength=n * 4 * bins).reshape(n, 4 * bins)
    return counts / idx.shape[-1]


def layer_stack(variant, n_features):
    if variant == "linear":
        return [("out", nm.fullyconnected(n_features, N_CLASSES, name="out"))]
    if variant == "hidden100":
        return [
            ("hidden", nm.fullyconnected(n_features, HIDDEN_UNITS, name="hidden")),
            ("hidden_relu", nm.relu()),
            ("out", nm.fullyconnected(HIDDEN_UNITS, N_CLASSES, name="out")),
        ]
    raise ValueError(f"unknown baseline variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class BaselineModel:
    variant: str
    bins: int
    params: nm.ParamSet
    history: list = field(default_factory=list)  # per-epoch validation top-1
    best_epoch: int = 0

    @property
    def layers(self):
        return layer_stack(self.variant, 4 * self.bins)

    def predict_features(self, X):
        a = np.asarray(X, dtype=np.float64)
        for name, layer in self.layers:
            a = nm.forward(layer, self.params.slice(name), a)
        return nm.forward(nm.softmax(), None, a)

    def save(self, path_stem):
        nm.save_ntw(f"{path_stem}.ntw", self.params)
        with open(f"{path_stem}.json", "w") as fh:
            json.dump({"variant": self.variant, "bins": self.bins}, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path_stem):
        with open(f"{path_stem}.json") as fh:
            meta = json.load(fh)
        tensors = nm.load_ntw(f"{path_stem}.ntw")
        model = cls(meta["variant"], meta["bins"], nm.ParamSet(tensors))
        expected = init_params(model.variant, model.bins, np.random.default_rng(0))
        for name in expected:
            if name not in model.params or model.params[name].shape != expected[name].shape:
                raise ValueError(f"{path_stem}.ntw does not match a {model.variant} model with {model.bins} bins")
        return model


def init_params(variant, bins, rng):
    params = nm.ParamSet()
    for name, layer in layer_stack(variant, 4 * bins):
        for key, value in nm.init_layer_params(layer, rng).items():
            params.add(f"{name}.{key}", value)
    return params


def _loss_and_grads(layers, params, X, y):
    a, caches = X, []
    for name, layer in layers:
        p = params.slice(name)
        a, cache = nm.forward_cached(layer, p, a)
        caches.append((name, layer, p, cache))
    probs, sm_cache = nm.forward_cached(nm.softmax(), None, a)
    loss = float(nm.cross_entropy(probs, y).mean())
    g, _ = nm.backward_cached(nm.softmax(), None, sm_cache, nm.cross_entropy_grad(probs, y))
    grads = {}
    for i in reversed(range(len(caches))):
        name, layer, p, cache = caches[i]
        g, dp = nm.backward_cached(layer, p, cache, g, need_input_grad=i > 0)
        for key, value in dp.items():
            grads[f"{name}.{key}"] = value
    return loss, grads


def accuracy(probs, y):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


def fit(variant, X_train, y_train, X_val, y_val, bins, lr=1e-3, epochs=100, batch_size=32, seed=0):
    """Train on precomputed features; keeps the best-validation-accuracy snapshot."""
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train)
    y_val = np.asarray(y_val)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng([seed, 17])
    params = init_params(variant, bins, rng)
    model = BaselineModel(variant, bins, params)
    layers = model.layers
    best_acc, best = -1.0, params.copy()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X_train))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            _, grads = _loss_and_grads(layers, params, X_train[batch], y_train[batch])
            nm.adam_step(params, grads, lr, inplace=True)
        acc = accuracy(model.predict_features(X_val), y_val)
        model.history.append(acc)
        if acc > best_acc:
            best_acc, best, model.best_epoch = acc, params.copy(), epoch
    model.params = best
    return model


def labelled_arrays(exams, bins):
    stack = np.stack([e.pixel_stack() for e in exams])
    return features_from_stack(stack, bins), np.array([e.density for e in exams])


def train_baseline(variant, train, validation, bins, lr=1e-3, epochs=100, batch_size=32, seed=0):
    """Train a baseline on exams carrying ``density`` labels.

    ``train``/``validation`` are sequences of exams, or ``(stack, labels)``
    tuples with a ``(n, 4, H, W)`` pixel stack.
    """
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training and validation splits must be non-empty")
    Xt, yt = _as_features(train, bins)
    Xv, yv = _as_features(validation, bins)
    return fit(variant, Xt, yt, Xv, yv, bins, lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)


def _as_features(split, bins):
    if isinstance(split, tuple):
        stack, labels = split
        return features_from_stack(stack, bins), np.asarray(labels)
    return labelled_arrays(split, bins)


def tune_bins(variant, train, validation, candidates=BIN_CANDIDATES, seed=0, **train_kw):
    """Fit one model per bin count; pick the best validation top-1 (ties: fewer bins)."""
    if not candidates:
        raise ValueError("no bin candidates given")
    results = {}
    models = {}
    for bins in sorted(candidates):
        model = train_baseline(variant, train, validation, bins, seed=seed, **train_kw)
        models[bins] = model
        results[bins] = max(model.history) if model.history else _initial_accuracy(model, validation)
    best = max(sorted(results), key=lambda b: (results[b], -b))
    return best, results, models[best]


def _initial_accuracy(model, validation):
    X, y = _as_features(validation, model.bins)
    return accuracy(model.predict_features(X), y)


def predict(model, exam):
    """Class probabilities for one exam."""
    return model.predict_features(extract_features(exam.views, model.bins)[None, :])[0]
