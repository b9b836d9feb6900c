"""Multi-column CNN: one convolutional column per view, concatenated
embeddings, a fully connected hidden layer and a softmax classifier."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .common import MAX_INTENSITY, N_CLASSES, VIEWS


class ConfigError(ValueError):
    pass


class TransferError(ValueError):
    pass


def desk_column(embedding=256):
    """conv3x3x8 / conv3x3x16 / conv3x3x32, each with rectifier and 2x2 max-pool,
    then global average pooling and a fully connected embedding layer."""
    return [
        nm.conv(3, 1, 8, name="conv1"), nm.relu(name="relu1"), nm.maxpool(2, name="pool1"),
        nm.conv(3, 8, 16, name="conv2"), nm.relu(name="relu2"), nm.maxpool(2, name="pool2"),
        nm.conv(3, 16, 32, name="conv3"), nm.relu(name="relu3"), nm.maxpool(2, name="pool3"),
        nm.globalavgpool(name="gap"),
        nm.fullyconnected(32, embedding, name="embed"),
    ]


@dataclass
class MultiColumnConfig:
    height: int = 128
    width: int = 96
    column: list = None
    embedding: int = 256
    hidden: int = 1024
    n_classes: int = N_CLASSES
    share_columns: bool = True

    def __post_init__(self):
        if self.column is None:
            self.column = desk_column(self.embedding)
        names = [layer.name for layer in self.column]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ConfigError("column layers need unique, non-empty names")
        shape = (1, 1, self.height, self.width)
        try:
            for layer in self.column:
                shape = layer.output_shape(shape)
        except nm.ShapeError as exc:
            raise ConfigError(f"column does not fit {self.height}x{self.width} inputs: {exc}") from None
        flat = int(np.prod(shape[1:])) if len(shape) == 2 else int(np.prod(shape)) // shape[1]
        if len(shape) != 2 or flat != self.embedding:
            raise ConfigError(
                f"column must flatten to the embedding width {self.embedding}, got {flat} (output shape {shape})"
            )
        if self.n_classes < 2 or self.hidden < 1:
            raise ConfigError("need at least 2 classes and a positive hidden width")

    @property
    def head(self):
        return [
            ("head.fc", nm.fullyconnected(len(VIEWS) * self.embedding, self.hidden, name="head.fc")),
            ("head.relu", nm.relu(name="head.relu")),
            ("head.out", nm.fullyconnected(self.hidden, self.n_classes, name="head.out")),
        ]

    def column_prefix(self, view):
        return "column" if self.share_columns else f"column[{view}]"

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "column": [_layer_to_dict(layer) for layer in self.column],
            "embedding": self.embedding,
            "hidden": self.hidden,
            "n_classes": self.n_classes,
            "share_columns": self.share_columns,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["column"] = [nm.LayerSpec(**layer) for layer in d["column"]]
        return cls(**d)

    def with_classes(self, n_classes):
        d = self.to_dict()
        d["n_classes"] = n_classes
        return MultiColumnConfig.from_dict(d)


def _layer_to_dict(layer):
    return {k: getattr(layer, k) for k in layer.__dataclass_fields__}


FINAL_LAYER = "head.out"


def build_model(config, rng):
    """Glorot-initialised weights, zero biases."""
    params = nm.ParamSet()
    prefixes = ["column"] if config.share_columns else [config.column_prefix(v) for v in VIEWS]
    for prefix in prefixes:
        for layer in config.column:
            for key, value in nm.init_layer_params(layer, rng).items():
                params.add(f"{prefix}.{layer.name}.{key}", value)
    for name, layer in config.head:
        for key, value in nm.init_layer_params(layer, rng).items():
            params.add(f"{name}.{key}", value)
    return params


def expected_param_count(config):
    per_column = sum(int(np.prod(s)) for layer in config.column for s in layer.param_shapes().values())
    columns = per_column * (1 if config.share_columns else len(VIEWS))
    head = sum(int(np.prod(s)) for _, layer in config.head for s in layer.param_shapes().values())
    return columns + head


def _tensors(params):
    return params.tensors if isinstance(params, nm.ParamSet) else params


def _slice(tensors, prefix):
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


TRAIN_DTYPE = np.float32


def to_input(pixels, dtype=np.float64):
    """Standardise each view to zero mean and unit variance."""
    x = np.asarray(pixels, dtype=dtype)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return (x - mean) / np.maximum(std, dtype(1e-6))


def _cast(tensors, dtype):
    if all(v.dtype == dtype for v in tensors.values()):
        return tensors
    return {k: v.astype(dtype) for k, v in tensors.items()}


def _check_stack(config, x):
    if x.ndim != 4 or x.shape[1] != len(VIEWS):
        raise nm.ShapeError(f"expected a (batch, 4, H, W) view stack, got shape {x.shape}")
    if x.shape[2:] != (config.height, config.width):
        raise nm.ShapeError(
            f"views must be {config.height}x{config.width}, got {x.shape[2]}x{x.shape[3]}"
        )


def _column_forward(config, tensors, prefix, x):
    a, caches = x, []
    for layer in config.column:
        p = _slice(tensors, f"{prefix}.{layer.name}")
        a, cache = nm.forward_cached(layer, p, a)
        caches.append((layer, p, cache))
    return a, caches


def _column_backward(caches, prefix, g, grads):
    for i in reversed(range(len(caches))):
        layer, p, cache = caches[i]
        g, dp = nm.backward_cached(layer, p, cache, g, need_input_grad=i > 0)
        for key, value in dp.items():
            name = f"{prefix}.{layer.name}.{key}"
            grads[name] = grads[name] + value if name in grads else value


def _forward(config, tensors, x):
    """Probabilities for a float ``(batch, 4, H, W)`` stack, plus caches for backprop."""
    _check_stack(config, x)
    n = x.shape[0]
    if config.share_columns:
        # all views through one column: images ordered (exam, view)
        col_in = x.reshape(1, n * len(VIEWS), config.height, config.width)
        emb, caches = _column_forward(config, tensors, "column", col_in)
        concat = emb.reshape(n, len(VIEWS) * config.embedding)
        col_caches = [("column", caches)]
    else:
        embs, col_caches = [], []
        for v, view in enumerate(VIEWS):
            prefix = config.column_prefix(view)
            emb, caches = _column_forward(config, tensors, prefix, x[None, :, v])
            embs.append(emb)
            col_caches.append((prefix, caches))
        concat = np.concatenate(embs, axis=1)
    a, head_caches = concat, []
    for name, layer in config.head:
        p = _slice(tensors, name)
        a, cache = nm.forward_cached(layer, p, a)
        head_caches.append((name, layer, p, cache))
    probs, sm_cache = nm.forward_cached(nm.softmax(), None, a)
    return probs, (col_caches, head_caches, sm_cache)


def loss_and_grads(config, params, x, y):
    """Mean cross-entropy and its gradient for every parameter."""
    tensors = _tensors(params)
    probs, (col_caches, head_caches, sm_cache) = _forward(config, tensors, x)
    loss = float(nm.cross_entropy(probs, y).mean())
    g_probs = nm.cross_entropy_grad(probs, y).astype(probs.dtype)
    g, _ = nm.backward_cached(nm.softmax(), None, sm_cache, g_probs)
    grads = {}
    for name, layer, p, cache in reversed(head_caches):
        g, dp = nm.backward_cached(layer, p, cache, g)
        for key, value in dp.items():
            grads[f"{name}.{key}"] = value
    n = x.shape[0]
    if config.share_columns:
        prefix, caches = col_caches[0]
        _column_backward(caches, prefix, g.reshape(n * len(VIEWS), config.embedding), grads)
    else:
        for v, (prefix, caches) in enumerate(col_caches):
            _column_backward(caches, prefix, g[:, v * config.embedding : (v + 1) * config.embedding], grads)
    return loss, grads


def predict_stack(params, config, stack, batch_size=32, dtype=np.float64):
    """Class probabilities for a uint16 ``(n, 4, H, W)`` stack."""
    tensors = _cast(_tensors(params), dtype)
    out = []
    for start in range(0, len(stack), batch_size):
        probs, _ = _forward(config, tensors, to_input(stack[start : start + batch_size], dtype))
        out.append(probs.astype(np.float64))
    if not out:
        return np.zeros((0, config.n_classes))
    return np.concatenate(out)


def forward_exam(params, config, exam):
    """p(y|x) for one exam."""
    for view in VIEWS:
        shape = exam.views[view].pixels.shape
        if shape != (config.height, config.width):
            raise nm.ShapeError(f"view {view} is {shape[0]}x{shape[1]}, expected {config.height}x{config.width}")
    stack = np.stack([exam.views[v].pixels for v in VIEWS])[None]
    return predict_stack(params, config, stack)[0]


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    max_translation: int = 8
    intensity_jitter: float = 0.05
    enabled: bool = True

    @classmethod
    def disabled(cls):
        return cls(0, 0.0, False)


def augment(image, policy, rng):
    """Random integer shift (zero fill) and multiplicative intensity jitter."""
    pixels = np.asarray(getattr(image, "pixels", image))
    if not policy.enabled:
        return pixels
    m = policy.max_translation
    dy, dx = (int(v) for v in rng.integers(-m, m + 1, size=2)) if m > 0 else (0, 0)
    scale = rng.uniform(1 - policy.intensity_jitter, 1 + policy.intensity_jitter) if policy.intensity_jitter else 1.0
    return _shift_scale(pixels, dy, dx, scale)


def _shift_scale(pixels, dy, dx, scale):
    h, w = pixels.shape
    out = np.zeros_like(pixels)
    if abs(dy) < h and abs(dx) < w:
        src = pixels[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    if scale == 1.0:
        return out
    return np.clip(np.rint(out * scale), 0, MAX_INTENSITY).astype(pixels.dtype)


def augment_stack(stack, policy, rng):
    """Independent augmentation of every view in a ``(n, 4, H, W)`` stack."""
    if not policy.enabled:
        return stack
    out = np.empty_like(stack)
    for i in range(stack.shape[0]):
        for v in range(stack.shape[1]):
            out[i, v] = augment(stack[i, v], policy, rng)
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: nm.ParamSet
    history: list = field(default_factory=list)  # dicts: epoch, train_loss, val_accuracy
    best_epoch: int = 0
    initial: nm.ParamSet = None

    @property
    def val_accuracy(self):
        return [h["val_accuracy"] for h in self.history]


def train_cnn(config, train, validation, policy=None, lr=1e-3, epochs=50, batch_size=8, seed=0,
              init=None, log=None, dtype=TRAIN_DTYPE):
    """Adam on mean cross-entropy; returns the best-validation-accuracy snapshot.

    ``train`` and ``validation`` are ``(stack, labels)`` pairs with uint16
    ``(n, 4, H, W)`` stacks. ``init`` overrides the random initialisation.
    Forward and backward passes run in ``dtype``; the Adam state and the
    returned weights stay float64.
    """
    policy = policy or AugmentationPolicy()
    x_train, y_train = train
    x_val, y_val = validation
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng([seed, 29])
    params = init.copy() if init is not None else build_model(config, rng)
    result = TrainResult(params, initial=params.copy())
    best_acc = -1.0
    best = params.copy()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(y_train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start : start + batch_size])
            batch = augment_stack(x_train[idx], policy, rng)
            loss, grads = loss_and_grads(config, _cast(params.tensors, dtype), to_input(batch, dtype), y_train[idx])
            losses.append(loss * len(idx))
            nm.adam_step(params, grads, lr, inplace=True)
        train_loss = float(np.sum(losses) / len(y_train))
        # evaluation never augments
        acc = float(np.mean(predict_stack(params, config, x_val, dtype=dtype).argmax(axis=1) == y_val))
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": acc})
        if log is not None:
            log(f"epoch {epoch}: train loss {train_loss:.4f}, validation accuracy {acc:.4f}")
        if acc > best_acc:
            best_acc, best, result.best_epoch = acc, params.copy(), epoch
    result.params = best if epochs > 0 else params
    return result


def transfer_init(pretrained, target_config, rng, source_config=None):
    """Copy every tensor except the final layer, which is Glorot-initialised."""
    tensors = _tensors(pretrained)
    fresh = build_model(target_config, rng)
    mismatched = []
    for name in fresh.names():
        if name.startswith(FINAL_LAYER + "."):
            continue
        if name not in tensors:
            mismatched.append(f"{name} (missing)")
        elif tensors[name].shape != fresh[name].shape:
            mismatched.append(f"{name} {tensors[name].shape} vs {fresh[name].shape}")
    extra = [n for n in tensors if n not in fresh and not n.startswith(FINAL_LAYER + ".")]
    mismatched.extend(f"{n} (unexpected)" for n in extra)
    if source_config is not None:
        a, b = source_config.to_dict(), target_config.to_dict()
        a.pop("n_classes")
        b.pop("n_classes")
        if a != b:
            mismatched.append("architecture differs beyond the class count")
    if mismatched:
        raise TransferError("cannot transfer weights: " + "; ".join(mismatched))
    out = nm.ParamSet()
    for name in fresh.names():
        if name.startswith(FINAL_LAYER + "."):
            out.add(name, fresh[name])
        else:
            out.add(name, tensors[name])
    return out


def epochs_to_threshold(history, threshold):
    """1-based epoch at which validation accuracy first reaches ``threshold``."""
    accs = [h["val_accuracy"] if isinstance(h, dict) else h for h in history]
    if not accs:
        raise ValueError("empty history")
    for i, acc in enumerate(accs, start=1):
        if acc >= threshold:
            return i
    return None


def save_model(path_stem, params, config, metadata=None):
    nm.save_ntw(f"{path_stem}.ntw", params)
    sidecar = {
        "config": config.to_dict(),
        "n_classes": config.n_classes,
        "share_columns": config.share_columns,
        "training": metadata or {},
    }
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")


def load_model(path_stem):
    with open(f"{path_stem}.json") as fh:
        sidecar = json.load(fh)
    config = MultiColumnConfig.from_dict(sidecar["config"])
    params = nm.ParamSet(nm.load_ntw(f"{path_stem}.ntw"))
    missing = [n for n in build_model(config, np.random.default_rng(0)).names() if n not in params]
    if missing:
        raise ConfigError(f"{path_stem}.ntw lacks parameters {missing}")
    return params, config, sidecar.get("training", {})
