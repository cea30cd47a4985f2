"""
The fixed classifier under attack: architecture, training, persistence and
the datasets it is trained on.

A model is an ordered list of layers (``affine``, ``relu``, ``conv2d-3x3``,
``flatten``) applied to a flat feature vector, reshaped to ``input_shape``
first. ``logits`` and ``predict`` accept a single vector ``(n,)`` or a batch
``(B, n)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ADVM"
MODEL_VERSION = 1
_LAYER_TAGS = {"affine": 1, "relu": 2, "conv2d-3x3": 3, "flatten": 4}
_TAG_NAMES = {v: k for k, v in _LAYER_TAGS.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Layer:
    """One layer of the architecture descriptor. ``dims`` is (in, out) for
    affine and (c_in, c_out) for conv2d-3x3, empty otherwise."""

    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in _LAYER_TAGS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class InputSample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    features: np.ndarray  # (N, n) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    seed: int | None = None
    image_shape: tuple | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (N, n) with one label per row")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise ValueError("feature values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return InputSample(self.features[i], int(self.labels[i]))

    @property
    def dimension(self):
        return self.features.shape[1]


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    init_scale: float = 1.0

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainingConfig":
        known = {f: values[f] for f in cls.__dataclass_fields__ if f in values}
        cfg = cls()
        for k, v in known.items():
            setattr(cfg, k, type(getattr(cfg, k))(v))
        return cfg


@dataclass
class ClassifierModel:
    layers: list
    params: list  # float32 arrays in declaration order
    input_shape: tuple
    label_names: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [l if isinstance(l, Layer) else Layer(l[0], tuple(l[1:])) for l in self.layers]
        self.params = [np.ascontiguousarray(p, dtype=np.float32) for p in self.params]
        for p in self.params:
            p.setflags(write=False)
        self._check()
        self._param_tensors = [T.Tensor(p, name=f"param{i}") for i, p in enumerate(self.params)]

    def _check(self):
        shapes = _param_shapes(self.layers, self.input_shape)
        if [tuple(p.shape) for p in self.params] != shapes:
            raise ValueError("parameter shapes do not match the architecture")
        out = _output_shape(self.layers, self.input_shape)
        if len(out) != 1:
            raise ValueError("final layer must produce a vector of logits")
        if len(self.label_names) != out[0]:
            raise ValueError(f"expected {out[0]} label names, got {len(self.label_names)}")
        if len(set(self.label_names)) != len(self.label_names):
            raise ValueError("label names must be unique")

    @property
    def n_inputs(self):
        return int(np.prod(self.input_shape))

    @property
    def n_classes(self):
        return len(self.label_names)

    def param_tensors(self, trainable=False):
        if trainable:
            return [T.Tensor(p, requires_grad=True, name=f"param{i}") for i, p in enumerate(self.params)]
        return self._param_tensors

    def forward(self, x: T.Tensor, params=None) -> T.Tensor:
        """Logits as a graph node; ``x`` is (n,) or (B, n)."""
        params = self._param_tensors if params is None else params
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_inputs:
            raise T.ShapeError(f"model input: expected feature length {self.n_inputs}, got shape {x.shape}")
        single = x.ndim == 1
        h = T.reshape(x, (1, x.shape[0])) if single else x
        batch = h.shape[0]
        if len(self.input_shape) > 1:
            h = T.reshape(h, (batch,) + self.input_shape)
        it = iter(params)
        for layer in self.layers:
            if layer.kind == "affine":
                h = T.matmul(h, next(it)) + next(it)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "conv2d-3x3":
                h = T.conv2d_3x3(h, next(it), next(it))
            else:
                h = T.reshape(h, (batch, int(np.prod(h.shape[1:]))))
        return T.reshape(h, (h.shape[1],)) if single else h

    def logits(self, x) -> np.ndarray:
        return self.forward(T.Tensor(np.asarray(x, dtype=np.float32))).numpy()

    def predict(self, x) -> np.ndarray:
        return softmax_np(self.logits(x))

    def classify(self, x) -> np.ndarray:
        return np.argmax(self.predict(x), axis=-1)


def softmax_np(z):
    """Row-wise softmax with the same arithmetic as the graph primitive."""
    return T.softmax(T.Tensor(np.asarray(z, dtype=np.float32))).numpy()


def _output_shape(layers, input_shape):
    shape = tuple(input_shape)
    for layer in layers:
        if layer.kind == "affine":
            if len(shape) != 1 or shape[0] != layer.dims[0]:
                raise ValueError(f"affine layer expects ({layer.dims[0]},), got {shape}")
            shape = (layer.dims[1],)
        elif layer.kind == "conv2d-3x3":
            if len(shape) != 3 or shape[0] != layer.dims[0]:
                raise ValueError(f"conv2d-3x3 expects {layer.dims[0]} channels, got {shape}")
            shape = (layer.dims[1],) + shape[1:]
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
    return shape


def _param_shapes(layers, input_shape):
    _output_shape(layers, input_shape)
    shapes = []
    for layer in layers:
        if layer.kind == "affine":
            shapes += [tuple(layer.dims), (layer.dims[1],)]
        elif layer.kind == "conv2d-3x3":
            c_in, c_out = layer.dims
            shapes += [(c_out, c_in, 3, 3), (c_out,)]
    return shapes


def mlp_architecture(n_inputs, hidden, n_classes):
    """Affine-ReLU stack; ``hidden`` is a sequence of widths."""
    layers, width = [], n_inputs
    for h in hidden:
        layers += [Layer("affine", (width, h)), Layer("relu")]
        width = h
    layers.append(Layer("affine", (width, n_classes)))
    return layers


def init_params(layers, input_shape, rng, scale=1.0):
    params = []
    for shape in _param_shapes(layers, input_shape):
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = scale * np.sqrt(2.0 / fan_in)
            params.append((rng.standard_normal(shape) * std).astype(np.float32))
    return params


# training -----------------------------------------------------------------


def cross_entropy_batch(logits: T.Tensor, labels) -> T.Tensor:
    """Mean cross-entropy of a (B, C) logit batch against integer labels."""
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.sum_reduce(T.log_softmax(logits) * onehot, axis=-1)
    return T.sum_reduce(picked) * (-1.0 / len(labels))


def accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(model.classify(dataset.features) == dataset.labels))


def train(dataset, layers, config: TrainingConfig, label_names, input_shape=None, validation=None):
    """
    Fit a classifier with mini-batch gradient descent on the mean
    cross-entropy. Deterministic for a given ``config.seed``.

    :return: (model, {"train_accuracy": ..., "validation_accuracy": ...})
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    n_classes = len(label_names)
    missing = sorted(set(range(n_classes)) - set(dataset.labels.tolist()))
    if missing:
        raise ValueError(f"training labels do not cover classes {missing}")
    input_shape = tuple(input_shape or (dataset.dimension,))
    rng = np.random.default_rng(config.seed)
    layers = [l if isinstance(l, Layer) else Layer(l[0], tuple(l[1:])) for l in layers]
    values = init_params(layers, input_shape, rng, config.init_scale)
    shell = ClassifierModel(layers, values, input_shape, list(label_names))

    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            params = [T.Tensor(v, requires_grad=True) for v in values]
            try:
                loss = cross_entropy_batch(shell.forward(T.Tensor(dataset.features[idx]), params), dataset.labels[idx])
            except T.NonFiniteError as exc:
                raise FloatingPointError(f"training diverged at epoch {epoch}: {exc}") from None
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"training diverged at epoch {epoch} (loss={loss.item()})")
            loss.backward()
            values = [(v - config.learning_rate * p.grad).astype(np.float32) for v, p in zip(values, params)]
            total += loss.item() * len(idx)
        log.debug("epoch %d loss %.4f", epoch, total / n)
    model = ClassifierModel(layers, values, input_shape, list(label_names))
    report = {"train_accuracy": accuracy(model, dataset)}
    if validation is not None:
        report["validation_accuracy"] = accuracy(model, validation)
    return model, report


# persistence --------------------------------------------------------------


def save_model(model: ClassifierModel, path):
    """
    Write the ADVM format: magic, u16 version, input rank and dims, layer
    descriptors (u8 tag, u8 dim count, u32 dims), label names (u16 length +
    UTF-8), then every parameter as little-endian float32, in order.
    """
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<H", MODEL_VERSION)
    out += struct.pack("<B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<H", len(model.layers))
    for layer in model.layers:
        out += struct.pack("<BB", _LAYER_TAGS[layer.kind], len(layer.dims))
        out += struct.pack(f"<{len(layer.dims)}I", *layer.dims)
    out += struct.pack("<H", len(model.label_names))
    for name in model.label_names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    for p in model.params:
        out += p.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_model(path) -> ClassifierModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an ADVM model file")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<H")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    (rank,) = take("<B")
    input_shape = take(f"<{rank}I")
    (n_layers,) = take("<H")
    layers = []
    for _ in range(n_layers):
        tag, ndims = take("<BB")
        if tag not in _TAG_NAMES:
            raise ValueError(f"{path}: unknown layer tag {tag}")
        layers.append(Layer(_TAG_NAMES[tag], take(f"<{ndims}I")))
    (n_labels,) = take("<H")
    names = []
    for _ in range(n_labels):
        (length,) = take("<H")
        names.append(buf[pos : pos + length].decode("utf-8"))
        pos += length
    params = []
    for shape in _param_shapes(layers, input_shape):
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        params.append(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return ClassifierModel(layers, params, input_shape, names)


# datasets -----------------------------------------------------------------

_SPLITS = {"train": 1, "validation": 2}


def class_means(class_count, dimension, seed, spread=0.055, prototypes=None, prototype_weight=0.5):
    """
    Cluster centres around 0.5. With ``prototypes`` (one row per class, e.g.
    label embeddings) part of each centre is a fixed random projection of its
    prototype, so classes with similar prototypes sit close together.
    """
    rng = np.random.default_rng([seed, 0])
    own = rng.standard_normal((class_count, dimension))
    if prototypes is not None:
        p = np.asarray(prototypes, dtype=np.float64)
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
        proj = rng.standard_normal((p.shape[1], dimension))
        shared = p @ proj
        shared /= shared.std()
        own = np.sqrt(1 - prototype_weight) * own + np.sqrt(prototype_weight) * shared
    return 0.5 + spread * own


def generate_synthetic(class_count, samples_per_class, dimension, seed, split="train",
                       spread=0.055, noise=0.07, prototypes=None) -> Dataset:
    """
    Gaussian clusters clamped to [0, 1]. Centres depend only on ``seed``;
    the draw for each split uses its own stream. ``spread / noise`` controls
    the overlap between classes.
    """
    if split not in _SPLITS:
        raise ValueError(f"unknown split {split!r}")
    means = class_means(class_count, dimension, seed, spread, prototypes)
    rng = np.random.default_rng([seed, _SPLITS[split]])
    labels = np.repeat(np.arange(class_count), samples_per_class)
    x = means[labels] + noise * rng.standard_normal((len(labels), dimension))
    order = rng.permutation(len(labels))
    return Dataset(np.clip(x[order], 0.0, 1.0), labels[order], split=split, seed=seed)


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ValueError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train") -> Dataset:
    """Parse an IDX image/label pair (unsigned-byte payloads); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    flat = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64), split=split, image_shape=tuple(images.shape[1:]))


def correctly_classified(model, dataset) -> np.ndarray:
    """Indices of samples the model classifies correctly."""
    return np.flatnonzero(model.classify(dataset.features) == dataset.labels)
