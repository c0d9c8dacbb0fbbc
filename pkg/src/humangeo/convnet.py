"""Configurable VGG-style ConvNet: definition, forward/backward, fine-tuning, weight I/O.

A network is a :class:`NetworkSpec` (an ordered tuple of :class:`LayerSpec`)
plus a ``Weights`` mapping of ``"<layer>.weight"`` / ``"<layer>.bias"`` to
arrays. Taps name layers whose post-activation output should be captured: a
tap on a conv or linear layer that is immediately followed by a ReLU yields
the ReLU output.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, TrainingDivergedError, UsageError
from .evaluation import confusion, mean_class_accuracy

log = logging.getLogger(__name__)

Weights = dict  # str -> np.ndarray, insertion-ordered by layer

LAYER_KINDS = ("conv", "relu", "maxpool", "linear", "dropout", "softmax")
LEARNABLE = ("conv", "linear")

WEIGHTS_MAGIC = b"GSWT"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out: int = 0  # conv filters / linear outputs
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0
    p: float = 0.5
    tap: str | None = None


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int
    mean: tuple = (0.0, 0.0, 0.0)  # per-channel preprocessing mean

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        validate(self)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise UsageError(f"no layer named {name!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> NetworkSpec:
        raw = json.loads(text)
        layers = tuple(LayerSpec(**layer) for layer in raw.pop("layers"))
        return cls(layers=layers, **raw)


def conv(name, out, kernel, stride=1, pad=0, tap=None):
    return LayerSpec("conv", name, out=out, kernel=kernel, stride=stride, pad=pad, tap=tap)


def relu(name):
    return LayerSpec("relu", name)


def maxpool(name, window, stride):
    return LayerSpec("maxpool", name, window=window, stride=stride)


def linear(name, out, tap=None):
    return LayerSpec("linear", name, out=out, tap=tap)


def dropout(name, p=0.5):
    return LayerSpec("dropout", name, p=p)


def softmax(name="prob"):
    return LayerSpec("softmax", name)


def validate(spec: NetworkSpec) -> list:
    """Check layer compatibility; return the output shape of every layer."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ShapeError(f"input shape must be positive C,H,W, got {spec.input_shape}")
    if not spec.layers:
        raise ShapeError("network has no layers")
    names = [layer.name for layer in spec.layers]
    if len(set(names)) != len(names):
        raise ShapeError(f"duplicate layer names in {names}")
    taps = [layer.tap for layer in spec.layers if layer.tap]
    if len(set(taps)) != len(taps):
        raise ShapeError(f"duplicate tap names in {taps}")
    shape = spec.input_shape
    shapes = []
    seen_conv = False
    for layer in spec.layers:
        kind = layer.kind
        if kind not in LAYER_KINDS:
            raise ShapeError(f"layer {layer.name}: unknown kind {kind!r}")
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"layer {layer.name}: conv after flattening")
            if layer.out < 1 or layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                raise ShapeError(f"layer {layer.name}: bad conv hyperparameters")
            c, h, w = shape
            if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
                raise ShapeError(f"layer {layer.name}: kernel {layer.kernel} exceeds padded input {h}x{w}")
            shape = (layer.out, T._out_size(h, layer.kernel, layer.stride, layer.pad),
                     T._out_size(w, layer.kernel, layer.stride, layer.pad))
            seen_conv = True
        elif kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"layer {layer.name}: maxpool after flattening")
            c, h, w = shape
            if layer.window < 1 or layer.stride < 1 or layer.window > min(h, w):
                raise ShapeError(f"layer {layer.name}: window {layer.window} does not fit {h}x{w}")
            shape = (c, T._out_size(h, layer.window, layer.stride, 0), T._out_size(w, layer.window, layer.stride, 0))
        elif kind == "linear":
            if not seen_conv:
                raise ShapeError(f"layer {layer.name}: a conv layer must precede the first linear layer")
            if layer.out < 1:
                raise ShapeError(f"layer {layer.name}: bad output size {layer.out}")
            shape = (layer.out,)
        elif kind == "dropout":
            if not 0 <= layer.p < 1:
                raise ShapeError(f"layer {layer.name}: dropout probability {layer.p} outside [0, 1)")
        elif kind == "softmax":
            if len(shape) != 1:
                raise ShapeError(f"layer {layer.name}: softmax needs a flat input, got {shape}")
        shapes.append(shape)
    last = spec.layers[-1]
    if last.kind != "softmax":
        raise ShapeError("final layer must be softmax")
    if shapes[-1] != (spec.num_classes,):
        raise ShapeError(f"softmax width {shapes[-1]} != num_classes {spec.num_classes}")
    return shapes


def param_shapes(spec: NetworkSpec) -> dict:
    """Expected shape of every learnable tensor, in layer order."""
    shapes = validate(spec)
    out = {}
    prev = spec.input_shape
    for layer, shape in zip(spec.layers, shapes):
        if layer.kind == "conv":
            out[f"{layer.name}.weight"] = (layer.out, prev[0], layer.kernel, layer.kernel)
            out[f"{layer.name}.bias"] = (layer.out,)
        elif layer.kind == "linear":
            out[f"{layer.name}.weight"] = (layer.out, int(np.prod(prev)))
            out[f"{layer.name}.bias"] = (layer.out,)
        prev = shape
    return out


def _tap_index(spec: NetworkSpec, name: str) -> int:
    """Index of the layer whose output answers tap ``name`` (post-activation)."""
    for i, layer in enumerate(spec.layers):
        if layer.tap == name or layer.name == name:
            if layer.kind in LEARNABLE and i + 1 < len(spec.layers) and spec.layers[i + 1].kind == "relu":
                return i + 1
            return i
    raise UsageError(f"unknown tap {name!r}; available: {tap_names(spec)}")


def tap_names(spec: NetworkSpec) -> list:
    return [layer.tap for layer in spec.layers if layer.tap]


def tap_shape(spec: NetworkSpec, name: str) -> tuple:
    return validate(spec)[_tap_index(spec, name)]


def last_conv_name(spec: NetworkSpec) -> str:
    convs = [layer.name for layer in spec.layers if layer.kind == "conv"]
    if not convs:
        raise UsageError("network has no conv layer")
    return convs[-1]


# ---------------------------------------------------------------------------
# architectures


def desk_spec(num_classes: int, input_size: int = 64, filters=(8, 16, 32, 64), hidden: int = 256,
              mean=(0.0, 0.0, 0.0), pools=(2, 2, 1, 4)) -> NetworkSpec:
    """Miniature VGG-F: conv3x3/ReLU blocks, one hidden FC layer, softmax.

    ``pools`` gives the max-pool window (= stride) after each block, 1 for
    none. The default skips pooling after conv3 so the last conv layer
    still sees a 16x16 grid on 64x64 inputs, which keeps its upsampled
    heatmaps sharp enough to localize the person box.
    """
    if len(pools) != len(filters):
        raise UsageError(f"need one pool window per conv block, got {len(pools)} for {len(filters)}")
    layers = []
    for i, (f, pool) in enumerate(zip(filters, pools), start=1):
        tap = f"conv{i}" if i == len(filters) else None
        layers += [conv(f"conv{i}", f, 3, pad=1, tap=tap), relu(f"relu{i}")]
        if pool > 1:
            layers.append(maxpool(f"pool{i}", pool, pool))
    layers += [linear("fc7", hidden, tap="fc7"), relu("relu7"), linear("fc8", num_classes), softmax()]
    return NetworkSpec(tuple(layers), (3, input_size, input_size), num_classes, mean)


def vggf_spec(num_classes: int = 1000) -> NetworkSpec:
    """VGG-F geometry (Chatfield et al.) without local response normalization.

    The reference model pads its pooling layers asymmetrically; a 227 x 227
    input gives the same 13 x 13 conv maps and 6 x 6 x 256 fc6 input with
    plain floor pooling.
    """
    layers = (
        conv("conv1", 64, 11, stride=4), relu("relu1"), maxpool("pool1", 3, 2),
        conv("conv2", 256, 5, pad=2), relu("relu2"), maxpool("pool2", 3, 2),
        conv("conv3", 256, 3, pad=1), relu("relu3"),
        conv("conv4", 256, 3, pad=1), relu("relu4"),
        conv("conv5", 256, 3, pad=1, tap="conv5"), relu("relu5"), maxpool("pool5", 3, 2),
        linear("fc6", 4096, tap="fc6"), relu("relu6"),
        linear("fc7", 4096, tap="fc7"), relu("relu7"),
        linear("fc8", num_classes), softmax(),
    )
    return NetworkSpec(layers, (3, 227, 227), num_classes)


def build_network(spec: NetworkSpec, init: str = "gaussian", sigma: float = 0.01, seed: int = 0) -> Weights:
    """Initialize weights. ``init`` is ``gaussian`` (fixed sigma), ``he``
    (Gaussian with sigma = sqrt(2 / fan_in)) or ``zeros``. Biases start at 0.
    """
    if init not in ("gaussian", "he", "zeros"):
        raise UsageError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias") or init == "zeros":
            weights[name] = np.zeros(shape, dtype=T.DTYPE)
            continue
        s = sigma if init == "gaussian" else math.sqrt(2.0 / int(np.prod(shape[1:])))
        weights[name] = (rng.standard_normal(shape, dtype=np.float64) * s).astype(T.DTYPE)
    return weights


def check_weights(spec: NetworkSpec, weights: Weights) -> None:
    expected = param_shapes(spec)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeError(f"layer {name.split('.')[0]}: missing tensor {name}")
        if tuple(weights[name].shape) != shape:
            raise ShapeError(f"layer {name.split('.')[0]}: {name} has shape {tuple(weights[name].shape)}, "
                             f"spec expects {shape}")
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise ShapeError(f"weights contain tensors not in spec: {extra}")


# ---------------------------------------------------------------------------
# forward / backward


def _run(spec, weights, x, train_mode, rng, taps=(), cache=None):
    """Run all layers but the final softmax. Returns ``(logits, tap_outputs)``."""
    want = {}
    for name in taps:
        want.setdefault(_tap_index(spec, name), []).append(name)
    captured = {}
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "softmax":
            break
        if kind == "conv":
            w, b = weights[f"{layer.name}.weight"], weights[f"{layer.name}.bias"]
            y = T.conv2d(x, w, b, layer.stride, layer.pad)
            saved = {"input": x}
        elif kind == "relu":
            y = T.relu(x)
            saved = {"input": x}
        elif kind == "maxpool":
            y, idx = T.maxpool2d(x, layer.window, layer.stride, return_indices=True)
            saved = {"indices": idx, "input_shape": x.shape}
        elif kind == "linear":
            flat = x.reshape(x.shape[0], -1)
            y = T.linear(flat, weights[f"{layer.name}.weight"], weights[f"{layer.name}.bias"])
            saved = {"input": flat, "input_shape": x.shape}
        elif kind == "dropout":
            y, mask = T.dropout(x, layer.p, rng, train_mode)
            saved = {"mask": mask}
        if cache is not None:
            cache.append((layer, saved))
        x = y
        for name in want.get(i, ()):
            captured[name] = x
    return x, captured


def forward(spec: NetworkSpec, weights: Weights, batch: np.ndarray, taps=(), train_mode: bool = False,
            rng: np.random.Generator | None = None):
    """Class probabilities for an NCHW batch plus the requested tap outputs."""
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match network input {spec.input_shape}")
    for name in taps:
        _tap_index(spec, name)
    logits, captured = _run(spec, weights, batch, train_mode, rng, taps)
    return T.softmax(logits), captured


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = T.log_softmax(logits.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_grads(spec: NetworkSpec, weights: Weights, batch: np.ndarray, labels: np.ndarray,
                   train_mode: bool = True, rng: np.random.Generator | None = None):
    """Mean softmax cross-entropy over the batch and its gradient for every weight."""
    labels = np.asarray(labels, dtype=np.intp)
    cache = []
    logits, _ = _run(spec, weights, batch, train_mode, rng, cache=cache)
    loss = cross_entropy(logits, labels)
    n = len(labels)
    g = T.softmax(logits)
    g[np.arange(n), labels] -= 1
    g /= n
    grads = {}
    for layer, saved in reversed(cache):
        kind = layer.kind
        if kind == "conv":
            w = weights[f"{layer.name}.weight"]
            g, dw, db = T.conv2d_backward(g, saved["input"], w, layer.stride, layer.pad)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif kind == "linear":
            w = weights[f"{layer.name}.weight"]
            g, dw, db = T.linear_backward(g, saved["input"], w)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
            g = g.reshape(saved["input_shape"])
        elif kind == "relu":
            g = T.relu_backward(g, saved["input"])
        elif kind == "maxpool":
            g = T.maxpool2d_backward(g, saved["indices"], saved["input_shape"], layer.window, layer.stride)
        elif kind == "dropout":
            g = T.dropout_backward(g, saved["mask"])
    grads = {name: grads[name] for name in weights}
    return loss, grads


def predict_proba(spec: NetworkSpec, weights: Weights, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [forward(spec, weights, images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes), dtype=T.DTYPE)


def extract_features(spec: NetworkSpec, weights: Weights, image: np.ndarray, tap: str) -> np.ndarray:
    """Flattened post-activation output at ``tap`` for one C x H x W image (eval mode)."""
    return extract_features_batch(spec, weights, image[None], tap)[0]


def extract_features_batch(spec: NetworkSpec, weights: Weights, images: np.ndarray, tap: str,
                           batch_size: int = 64) -> np.ndarray:
    _tap_index(spec, tap)
    chunks = []
    for i in range(0, len(images), batch_size):
        _, captured = forward(spec, weights, images[i : i + batch_size], taps=(tap,))
        chunks.append(captured[tap].reshape(len(captured[tap]), -1))
    if not chunks:
        return np.zeros((0, int(np.prod(tap_shape(spec, tap)))), dtype=T.DTYPE)
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# head replacement and fine-tuning


def replace_head(spec: NetworkSpec, weights: Weights, new_k: int, seed: int = 0, sigma: float = 0.01,
                 dropout_p: float = 0.5):
    """Swap the classifier for a fresh ``new_k``-way layer and add dropout.

    Dropout is inserted before each of the last two linear layers (between
    fc6/fc7 and fc7/fc8 on VGG-F) unless one is already there. Every other
    tensor is copied unchanged.
    """
    if new_k < 2:
        raise UsageError(f"new head needs at least 2 classes, got {new_k}")
    layers = list(spec.layers)
    if len(layers) < 2 or layers[-1].kind != "softmax" or layers[-2].kind != "linear":
        raise UsageError("network must end in linear + softmax to replace its head")
    head = layers[-2]
    linear_idx = [i for i, layer in enumerate(layers) if layer.kind == "linear"]
    new_layers = []
    for i, layer in enumerate(layers):
        if i in linear_idx[-2:] and linear_idx.index(i) > 0:
            prev = linear_idx[linear_idx.index(i) - 1]
            if not any(layers[j].kind == "dropout" for j in range(prev + 1, i)):
                new_layers.append(dropout(f"drop_{layers[prev].name}", dropout_p))
        new_layers.append(dataclasses.replace(layer, out=new_k) if layer is head else layer)
    new_spec = NetworkSpec(tuple(new_layers), spec.input_shape, new_k, spec.mean)
    shapes = param_shapes(new_spec)
    rng = np.random.default_rng(seed)
    new_weights = {}
    for name in shapes:
        if name == f"{head.name}.weight":
            new_weights[name] = (rng.standard_normal(shapes[name], dtype=np.float64) * sigma).astype(T.DTYPE)
        elif name == f"{head.name}.bias":
            new_weights[name] = np.zeros(shapes[name], dtype=T.DTYPE)
        else:
            new_weights[name] = weights[name].copy()
    return new_spec, new_weights


@dataclass
class FinetuneConfig:
    """SGD settings. ``lr_end`` switches on a geometric per-epoch decay from ``lr`` to ``lr_end``."""

    lr: float = 0.01
    lr_end: float | None = None
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or (self.lr_end is not None and self.lr_end <= 0):
            raise UsageError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise UsageError("momentum must be in [0, 1)")

    def rate(self, epoch: int) -> float:
        if self.lr_end is None or self.epochs == 1:
            return self.lr
        return self.lr * (self.lr_end / self.lr) ** (epoch / (self.epochs - 1))


def sgd_step(weights: Weights, grads: Weights, lr: float, velocity: Weights | None = None,
             momentum: float = 0.0) -> None:
    """In-place update ``v = momentum * v + g; w -= lr * v``."""
    for name, w in weights.items():
        g = grads[name]
        if velocity is not None and momentum:
            v = velocity.setdefault(name, np.zeros_like(w))
            v *= momentum
            v += g
            g = v
        w -= np.asarray(lr * g, dtype=w.dtype)


def _mca(spec, weights, images, labels) -> float:
    pred = predict_proba(spec, weights, images).argmax(axis=1)
    return mean_class_accuracy(confusion(pred, labels, spec.num_classes))


def finetune(spec: NetworkSpec, weights: Weights, train, val, config: FinetuneConfig,
             history: list | None = None) -> Weights:
    """Mini-batch SGD on softmax cross-entropy.

    ``train`` and ``val`` are ``(images, labels)`` pairs. Returns a copy of the
    weights from the epoch with the best validation mCA (earliest on ties);
    with an empty validation set training mCA is used instead. Per-epoch
    records are appended to ``history`` when given.
    """
    x_train, y_train = train
    y_train = np.asarray(y_train, dtype=np.intp)
    if len(x_train) == 0:
        raise UsageError("finetune: empty training set")
    if y_train.min() < 0 or y_train.max() >= spec.num_classes:
        raise UsageError(f"finetune: labels must lie in [0, {spec.num_classes})")
    x_val, y_val = val
    check_weights(spec, weights)
    weights = {k: v.copy() for k, v in weights.items()}
    velocity = {}
    rng = np.random.default_rng(config.seed)
    best, best_score = None, -1.0
    n = len(x_train)
    for epoch in range(config.epochs):
        lr = config.rate(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(spec, weights, x_train[idx], y_train[idx], train_mode=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start} "
                                            f"(lr={lr:g}); lower the learning rate")
            sgd_step(weights, grads, lr, velocity, config.momentum)
            losses.append(loss * len(idx))
        train_loss = sum(losses) / n
        if len(x_val):
            score = _mca(spec, weights, x_val, y_val)
        else:
            score = _mca(spec, weights, x_train, y_train)
        log.info("epoch %d lr %.3g loss %.4f val mCA %.4f", epoch, lr, train_loss, score)
        if history is not None:
            history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_mca": score})
        if score > best_score:
            best_score = score
            best = {k: v.copy() for k, v in weights.items()}
    return best


def train_from_scratch(spec: NetworkSpec, train, val, config: FinetuneConfig, init: str = "he",
                       history: list | None = None) -> Weights:
    """Stand-in for ImageNet pretraining: fit a freshly initialized network."""
    weights = build_network(spec, init=init, seed=config.seed)
    return finetune(spec, weights, train, val, config, history)


# ---------------------------------------------------------------------------
# weight files: magic, u8 version, u32 count, then per tensor u16 name length,
# utf-8 name, GSTN tensor


def save_weights(weights: Weights, path) -> None:
    with open(path, "wb") as fp:
        fp.write(WEIGHTS_MAGIC)
        fp.write(struct.pack("<BI", WEIGHTS_VERSION, len(weights)))
        for name, w in weights.items():
            raw = name.encode("utf-8")
            fp.write(struct.pack("<H", len(raw)))
            fp.write(raw)
            T.write_tensor(fp, w)


def load_weights(path, spec: NetworkSpec | None = None) -> Weights:
    """Read a weight file; with ``spec`` the shapes are checked layer by layer."""
    with open(path, "rb") as fp:
        data = fp.read()
    fp = io.BytesIO(data)
    if fp.read(4) != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weight file (bad magic)")
    header = fp.read(5)
    if len(header) != 5:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack("<BI", header)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    weights = {}
    for _ in range(count):
        raw_len = fp.read(2)
        if len(raw_len) != 2:
            raise FormatError(f"{path}: truncated entry header")
        (n,) = struct.unpack("<H", raw_len)
        raw = fp.read(n)
        if len(raw) != n:
            raise FormatError(f"{path}: truncated entry name")
        try:
            weights[raw.decode("utf-8")] = T.read_tensor(fp)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if fp.read(1):
        raise FormatError(f"{path}: trailing bytes")
    if spec is not None:
        check_weights(spec, weights)
    return weights


def save_network(spec: NetworkSpec, weights: Weights, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "network.json").write_text(spec.to_json() + "\n")
    save_weights(weights, d / "weights.gswt")


def load_network(directory):
    d = Path(directory)
    spec = NetworkSpec.from_json((d / "network.json").read_text())
    return spec, load_weights(d / "weights.gswt", spec)
