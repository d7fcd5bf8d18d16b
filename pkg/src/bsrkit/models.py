"""Small convolutional classifiers: construction, SGD training and checkpoints."""
from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import tensor as T
from .exceptions import (BadMagicError, ConfigurationError, ShapeError,
                         TruncatedCheckpointError, UsageError, VersionMismatchError)
from .tensor import Tensor
from .validation import check_images, check_labels

# ("conv", out_channels) is a 3x3 same-padded convolution + ReLU; "pool" is
# 2x2 max pooling; the final entry is the head ("gap" global average pooling
# or "flatten"), always followed by one dense layer.
ARCHITECTURES = {
    "cnn2": [("conv", 8), ("pool",), ("conv", 16), ("pool",), ("flatten",)],
    "cnn3": [("conv", 16), ("pool",), ("conv", 32), ("pool",), ("conv", 64), ("gap",)],
    "cnn4": [("conv", 12), ("pool",), ("conv", 24), ("conv", 32), ("pool",), ("conv", 48), ("gap",)],
}

CHECKPOINT_MAGIC = b"BSRCKPT\x00"
CHECKPOINT_VERSION = 1


def _layer_plan(architecture: str):
    try:
        return ARCHITECTURES[architecture]
    except KeyError:
        raise ConfigurationError(
            f"unknown architecture {architecture!r}; expected one of {sorted(ARCHITECTURES)}") from None


def parameter_shapes(architecture: str, input_shape, num_classes: int) -> dict:
    channels, height, width = (int(s) for s in input_shape)
    shapes, k, features = {}, 0, channels
    for layer in _layer_plan(architecture):
        if layer[0] == "conv":
            k += 1
            shapes[f"conv{k}.weight"] = (layer[1], channels, 3, 3)
            shapes[f"conv{k}.bias"] = (layer[1],)
            channels = features = layer[1]
        elif layer[0] == "pool":
            height, width = height // 2, width // 2
        elif layer[0] == "flatten":
            features = channels * height * width
        else:
            features = channels
    shapes["fc.weight"] = (num_classes, features)
    shapes["fc.bias"] = (num_classes,)
    return shapes


class ConvClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional image classifier trained with plain mini-batch SGD.

    Parameters
    ----------
    architecture : str
        Key of :data:`ARCHITECTURES`.
    input_shape : tuple of int
        (channels, height, width) of the images.
    num_classes : int
    seed : int
        Drives both parameter initialisation and mini-batch shuffling.
    epochs, lr, batch_size
        SGD settings used by :meth:`fit`.
    schedule : {"cosine", "constant"}
        Step-size schedule passed to :func:`train`.

    Attributes
    ----------
    parameters_ : dict of str to Tensor
        Available once the model is built (``build`` or ``fit``).
    classes_ : ndarray
    history_ : TrainStats
    """

    def __init__(self, architecture="cnn3", input_shape=(3, 32, 32), num_classes=4, seed=0,
                 epochs=20, lr=0.1, batch_size=32, schedule="cosine"):
        self.architecture = architecture
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule

    # -- construction -----------------------------------------------------
    def initialize(self) -> "ConvClassifier":
        """Draw fresh parameters from ``seed``: uniform fan-in scaled weights, zero biases."""
        if len(tuple(self.input_shape)) != 3:
            raise ConfigurationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if int(self.num_classes) < 2:
            raise ConfigurationError("num_classes must be at least 2")
        rng = np.random.default_rng(self.seed)
        params = {}
        for name, shape in parameter_shapes(self.architecture, self.input_shape, self.num_classes).items():
            if name.endswith(".bias"):
                data = np.zeros(shape, dtype=np.float32)
            else:
                bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
                data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            params[name] = Tensor(data, name=name)
        self.parameters_ = params
        self.classes_ = np.arange(self.num_classes)
        return self

    def _check_built(self):
        if not hasattr(self, "parameters_"):
            raise UsageError("model has no parameters; call build/fit or load a checkpoint first")

    @property
    def conv_layers(self) -> list:
        k = sum(1 for layer in _layer_plan(self.architecture) if layer[0] == "conv")
        return [f"conv{i}" for i in range(1, k + 1)]

    # -- forward ----------------------------------------------------------
    def forward(self, x, capture=(), dtype=None, params=None):
        """Logits for a batch; ``capture`` names conv activations to return as well.

        Returns the logits Tensor, or ``(logits, {name: activation})`` when
        ``capture`` is non-empty. ``dtype=np.float64`` evaluates a float64
        copy of the network (used by finite-difference checks).
        """
        self._check_built()
        params = self.parameters_ if params is None else params
        if dtype is not None and np.dtype(dtype) != np.float32:
            params = {k: Tensor(v.data.astype(dtype), dtype=dtype) for k, v in params.items()}
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=dtype or np.float32)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} does not match model input {tuple(self.input_shape)}")
        captured = {}
        # fixed centring of [0, 1] pixels to [-1, 1]
        h, k = T.mul_scalar(T.sub(x, 0.5), 2.0), 0
        for layer in _layer_plan(self.architecture):
            if layer[0] == "conv":
                k += 1
                try:
                    w, b = params[f"conv{k}.weight"], params[f"conv{k}.bias"]
                except KeyError as exc:
                    raise ShapeError(f"parameter {exc.args[0]} missing for architecture {self.architecture}") from None
                h = T.relu(T.conv2d(h, w, b, stride=1, padding=1))
                if f"conv{k}" in capture:
                    captured[f"conv{k}"] = h
            elif layer[0] == "pool":
                h = T.max_pool2d(h, 2)
            elif layer[0] == "flatten":
                h = T.flatten(h)
            else:
                h = T.global_avg_pool2d(h)
        try:
            logits = T.dense(h, params["fc.weight"], params["fc.bias"])
        except KeyError as exc:
            raise ShapeError(f"parameter {exc.args[0]} missing for architecture {self.architecture}") from None
        unknown = set(capture) - set(captured)
        if unknown:
            raise ConfigurationError(f"unknown layer(s) {sorted(unknown)}; expected one of {self.conv_layers}")
        return (logits, captured) if capture else logits

    def activation_pattern(self, x) -> list:
        """ReLU on/off masks and max-pool winners of a float64 forward pass.

        Two inputs with equal patterns lie on the same linear piece of the
        network, which is what a finite-difference stencil needs.
        """
        names = self.conv_layers
        _, acts = self.forward(x, capture=names, dtype=np.float64)
        pattern, k = [], 0
        for layer in _layer_plan(self.architecture):
            if layer[0] == "conv":
                k += 1
                act = acts[f"conv{k}"].data
                pattern.append(act > 0)
            elif layer[0] == "pool" and pattern:
                n, c, h, w = act.shape
                win = act[:, :, :h // 2 * 2, :w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2)
                pattern.append(win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4).argmax(-1))
                act = win.max(axis=(3, 5))
        return pattern

    def loss(self, x, y, reduction="mean"):
        return T.nll_loss(T.log_softmax(self.forward(x)), y, reduction=reduction)

    def decision_function(self, X, batch_size: int = 256) -> np.ndarray:
        self._check_built()
        X = check_images(X, shape=self.input_shape)
        out = [self.forward(X[i:i + batch_size]).data for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), np.float32)

    predict_logits = decision_function

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return self.decision_function(X).argmax(axis=1)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    # -- training ---------------------------------------------------------
    def fit(self, X, y):
        self.initialize()
        self.history_ = train(self, (X, y), epochs=self.epochs, lr=self.lr,
                              batch_size=self.batch_size, seed=self.seed, schedule=self.schedule)
        return self

    def checksum(self) -> str:
        self._check_built()
        h = hashlib.sha256()
        for name in sorted(self.parameters_):
            h.update(name.encode())
            h.update(self.parameters_[name].data.tobytes())
        return h.hexdigest()


def build(architecture: str, input_shape=(3, 32, 32), num_classes: int = 4, seed: int = 0,
          **kwargs) -> ConvClassifier:
    """Construct and initialise a classifier."""
    return ConvClassifier(architecture, tuple(input_shape), num_classes, seed, **kwargs).initialize()


@dataclass
class TrainStats:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def train(model: ConvClassifier, dataset, epochs: int = 20, lr: float = 0.05, batch_size: int = 32,
          seed: int = 0, callback=None, schedule: str = "constant") -> TrainStats:
    """Mini-batch SGD (no momentum) on the mean cross-entropy.

    ``schedule="cosine"`` anneals the step size per batch from ``lr`` to 0
    over the run; ``"constant"`` keeps it at ``lr``.

    ``dataset`` is a :class:`~bsrkit.datasets.LabeledDataset` or an
    ``(images, labels)`` pair. Statistics are accumulated over each epoch's
    batches as they are visited.
    """
    model._check_built()
    X, y = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    X = check_images(X, shape=model.input_shape)
    y = check_labels(y, X.shape[0], model.num_classes)
    if X.shape[0] == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if not lr >= 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    if batch_size < 1 or epochs < 0:
        raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
    if schedule not in ("constant", "cosine"):
        raise ConfigurationError(f"schedule must be 'constant' or 'cosine', got {schedule!r}")
    rng = np.random.default_rng(seed)
    per_epoch = -(-X.shape[0] // batch_size)
    total = max(1, epochs * per_epoch)
    step = np.float32(lr)
    stats = TrainStats()
    params = model.parameters_
    for p in params.values():
        p.requires_grad = True
    try:
        for epoch in range(epochs):
            order = rng.permutation(X.shape[0])
            total_loss, correct = 0.0, 0
            for start in range(0, X.shape[0], batch_size):
                idx = order[start:start + batch_size]
                logits = model.forward(X[idx])
                loss = T.nll_loss(T.log_softmax(logits), y[idx])
                for p in params.values():
                    p.grad = None
                T.backward(loss)
                if schedule == "cosine":
                    t = epoch * per_epoch + start // batch_size
                    step = np.float32(0.5 * lr * (1.0 + np.cos(np.pi * t / total)))
                for p in params.values():
                    p.data -= step * p.grad
                total_loss += loss.item() * idx.size
                correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            stats.loss.append(total_loss / X.shape[0])
            stats.accuracy.append(correct / X.shape[0])
            if callback is not None:
                callback(epoch, stats)
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None
    return stats


def predict(model: ConvClassifier, image):
    """Logits and arg-max class of a single (C, H, W) image."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ShapeError(f"predict expects one (C, H, W) image, got {img.shape}")
    logits = model.decision_function(img[None])[0]
    return logits, int(np.argmax(logits))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(model: ConvClassifier) -> bytes:
    model._check_built()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_encode_str(model.architecture))
    buf.write(struct.pack("<3I", *(int(s) for s in model.input_shape)))
    buf.write(struct.pack("<II", int(model.num_classes), len(model.parameters_)))
    for name, t in model.parameters_.items():
        buf.write(_encode_str(name))
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(t.data.astype("<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(
                f"truncated payload: needed {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(raw: bytes) -> ConvClassifier:
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError("bad magic: not a bsrkit checkpoint")
    r = _Reader(raw)
    r.take(len(CHECKPOINT_MAGIC))
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {CHECKPOINT_VERSION}")
    architecture = r.string()
    input_shape = r.u32(3)
    num_classes, count = r.u32(2)
    params = {}
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        extents = r.u32(rank) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        n = int(np.prod(extents)) if extents else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(extents)
        params[name] = Tensor(data, name=name)
    if r.pos != len(raw):
        raise TruncatedCheckpointError(f"{len(raw) - r.pos} trailing bytes after the last tensor")
    expected = parameter_shapes(architecture, input_shape, num_classes)
    found = {k: tuple(v.shape) for k, v in params.items()}
    if found != expected:
        bad = sorted(set(expected) ^ set(found)) or [k for k in expected if expected[k] != found[k]]
        raise ShapeError(f"checkpoint tensors do not fit architecture {architecture!r} (mismatch at {bad[:3]})")
    model = ConvClassifier(architecture, tuple(input_shape), num_classes)
    model.parameters_ = params
    model.classes_ = np.arange(num_classes)
    return model


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: ConvClassifier, path) -> None:
    atomic_write_bytes(path, dumps(model))


def load(path) -> ConvClassifier:
    with open(path, "rb") as fh:
        return loads(fh.read())
