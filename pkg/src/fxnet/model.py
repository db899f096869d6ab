"""The convolutional network: architecture, training, inference, transfer and FXM1 files."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import AugmentConfig, augment
from .layers import (
    BackwardRule,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    ReLU,
    ShapePlanError,
    sigmoid,
    softmax,
)
from .optim import Adam, LossSpec, head_loss
from .tensor import NonFiniteError, RngStream, check_finite, get_dtype

log = logging.getLogger(__name__)

MAX_HEAD_UNITS = 50
HEAD_ACTIVATIONS = ("softmax", "sigmoid", "linear")
EMOTIONS = ("neutral", "anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise")

# head presets exposed on the command line
HEADS = {
    "emotion8": (8, "softmax"),
    "au-binary": (44, "sigmoid"),
    "au-intensity": (44, "linear"),
}


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int] = (1, 48, 48)
    conv_filters: tuple[int, ...] = (64, 128, 256)
    kernel: int = 5
    padding: str = "same"
    dense_units: int = 512
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    head_units: int = 8
    head_activation: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        if not 1 <= self.head_units <= MAX_HEAD_UNITS:
            raise ValueError(f"head units must be in [1, {MAX_HEAD_UNITS}], got {self.head_units}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            raise ValueError(f"head activation must be one of {HEAD_ACTIVATIONS}, got {self.head_activation!r}")
        if self.kernel != 5:
            raise ValueError("conv kernels are 5x5")
        if len(self.input_shape) != 3 or not self.conv_filters:
            raise ValueError("need a (C, H, W) input shape and at least one conv block")

    def conv_names(self) -> list[str]:
        return [f"conv{i + 1}" for i in range(len(self.conv_filters))]

    def make_layers(self) -> list[Layer]:
        layers: list[Layer] = []
        for name, filters in zip(self.conv_names(), self.conv_filters):
            layers += [Conv2D(name, filters, self.kernel, self.padding), ReLU(f"{name}_relu"),
                       MaxPool2D(f"{name}_pool")]
        layers += [
            Dropout("conv_dropout", self.conv_dropout),
            Flatten("flatten"),
            Dense("dense1", self.dense_units),
            ReLU("dense1_relu"),
            Dropout("dense_dropout", self.dense_dropout),
            Dense("head", self.head_units),
        ]
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


class Model:
    def __init__(self, spec: NetworkSpec, layers: list[Layer], meta: dict | None = None):
        self.spec = spec
        self.layers = layers
        self.meta = dict(meta or {})
        self._index = {layer.name: i for i, layer in enumerate(layers)}

    def __getitem__(self, name: str) -> Layer:
        return self.layers[self.layer_index(name)]

    def layer_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}; layers are {list(self._index)}") from None

    @property
    def head_activation(self) -> str:
        return self.spec.head_activation

    @property
    def class_names(self) -> list[str]:
        names = self.meta.get("class_names")
        if names:
            return list(names)
        if self.spec.head_activation == "softmax" and self.spec.head_units == len(EMOTIONS):
            return list(EMOTIONS)
        return [str(i) for i in range(self.spec.head_units)]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Parameters in declared layer order, weights before biases."""
        return [(f"{layer.name}.{p}", layer.params[p]) for layer in self.layers for p in layer.param_names]

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def shapes(self) -> list[tuple[int, ...]]:
        shape = self.spec.input_shape
        out = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def forward(self, x: np.ndarray, *, train: bool = False, rng: RngStream | None = None,
                upto: str | None = None, record: dict | None = None) -> np.ndarray:
        """Run layers in order; stop after ``upto`` if given.

        ``record``, when a dict, receives every layer's output by name.
        """
        stop = self.layer_index(upto) if upto is not None else len(self.layers) - 1
        x = np.asarray(x, dtype=self.dtype)
        for i, layer in enumerate(self.layers[:stop + 1]):
            sub = rng.spawn(i) if rng is not None else None
            x = layer.forward(x, train=train, rng=sub)
            if record is not None:
                record[layer.name] = x
        return x

    def backward(self, grad: np.ndarray, *, start: str | None = None, stop: str | None = None,
                 rule: BackwardRule = BackwardRule.TRUE_GRADIENT, record: dict | None = None,
                 input_grad: bool = True) -> np.ndarray | None:
        """Back-propagate ``grad`` (w.r.t. the output of ``start``) down to the input.

        With ``stop`` set, the pass ends after that layer's backward.  ``record``
        receives the gradient w.r.t. each layer's *input*.  ``input_grad=False``
        skips the (unused) gradient w.r.t. the network input during training.
        """
        first = self.layer_index(start) if start is not None else len(self.layers) - 1
        last = self.layer_index(stop) if stop is not None else 0
        for layer in reversed(self.layers[last:first + 1]):
            if layer is self.layers[0] and not input_grad and isinstance(layer, Conv2D):
                layer.backward(grad, rule, input_grad=False)
                return None
            grad = layer.backward(grad, rule)
            if record is not None:
                record[layer.name] = grad
        return grad

    @property
    def dtype(self):
        params = self.named_parameters()
        return params[0][1].dtype if params else get_dtype()

    def logits(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        x = _as_batch(x, self.spec.input_shape)
        outs = [self.forward(x[s:s + batch]) for s in range(0, len(x), batch)]
        return check_finite(np.concatenate(outs), "logits")

    def layer_groups(self, names: Iterable[str]) -> set[str]:
        """Resolve freeze names; ``conv`` means every conv layer, ``trunk`` everything but the head."""
        resolved = set()
        for name in names:
            if name == "conv":
                resolved.update(self.spec.conv_names())
            elif name == "trunk":
                resolved.update(l.name for l in self.layers if l.param_names and l.name != "head")
            elif name == "all":
                resolved.update(l.name for l in self.layers if l.param_names)
            else:
                self.layer_index(name)
                resolved.add(name)
        return resolved


def _as_batch(x: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == tuple(input_shape):
        return x[None]
    if x.shape[1:] != tuple(input_shape):
        raise ValueError(f"expected images shaped {tuple(input_shape)}, got {x.shape}")
    return x


def build(spec: NetworkSpec, rng: RngStream, meta: dict | None = None) -> Model:
    """Instantiate ``spec`` with He-normal weights and zero biases."""
    layers = spec.make_layers()
    shape = spec.input_shape
    for layer in layers:
        try:
            out = layer.output_shape(shape)
        except ShapePlanError:
            raise
        except (ValueError, IndexError) as exc:
            raise ShapePlanError(f"{layer.name}: cannot accept input {shape}: {exc}") from exc
        layer.init_params(shape, rng)
        shape = out
    return Model(spec, layers, meta)


def apply_head(logits: np.ndarray, activation: str) -> np.ndarray:
    if activation == "softmax":
        return softmax(logits)
    if activation == "sigmoid":
        return sigmoid(logits)
    return logits


def predict(model: Model, images: np.ndarray) -> np.ndarray:
    """Class probabilities (softmax head) or AU outputs, inference mode."""
    single = np.asarray(images).shape == model.spec.input_shape
    out = apply_head(model.logits(images), model.head_activation)
    return out[0] if single else out


def decide(model: Model, outputs: np.ndarray) -> np.ndarray:
    """Turn head outputs into hard predictions: class ids, 0/1 AU flags or 0..5 intensities."""
    if model.head_activation == "softmax":
        return outputs.argmax(axis=-1)
    if model.head_activation == "sigmoid":
        return (outputs >= 0.5).astype(int)
    return np.clip(np.rint(outputs), 0, 5).astype(int)


def extract_features(model: Model, images: np.ndarray, layer: str = "dense1_relu", batch: int = 64) -> np.ndarray:
    single = np.asarray(images).shape == model.spec.input_shape
    x = _as_batch(images, model.spec.input_shape)
    model.layer_index(layer)
    feats = np.concatenate([model.forward(x[s:s + batch], upto=layer) for s in range(0, len(x), batch)])
    return feats[0] if single else feats


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    augment: bool = False
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    frozen: frozenset = frozenset()
    lr: float = 1e-3
    decay: float = 1e-5
    decay_mode: str = "lr"
    max_steps: int | None = None
    eval_train: bool = True
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    steps: int
    loss: float
    accuracy: float | None


def accuracy(model: Model, images: np.ndarray, targets: np.ndarray) -> float:
    pred = decide(model, predict(model, images))
    return float(np.mean(pred == np.asarray(targets)))


def _check_targets(model: Model, targets: np.ndarray, n: int) -> np.ndarray:
    targets = np.asarray(targets)
    if len(targets) != n:
        raise ValueError(f"{n} images but {len(targets)} targets")
    k = model.spec.head_units
    if model.head_activation == "softmax":
        targets = targets.astype(int)
        if targets.ndim != 1 or targets.min() < 0 or targets.max() >= k:
            bad = targets[(targets < 0) | (targets >= k)]
            raise ValueError(f"label(s) {sorted(set(bad.tolist()))} outside head range 0..{k - 1}")
    elif targets.ndim != 2 or targets.shape[1] != k:
        raise ValueError(f"AU targets must be (N, {k}), got {targets.shape}")
    return targets


def train(model: Model, images: np.ndarray, targets: np.ndarray, config: TrainConfig) -> list[EpochStats]:
    """Mini-batch ADAM training in place; returns the per-epoch trace.

    Shuffling, dropout masks and augmentation each draw from their own stream
    derived from ``config.seed``, so a run is reproducible bit for bit.
    """
    images = np.asarray(images, dtype=model.dtype)
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    targets = _check_targets(model, targets, n)
    frozen = model.layer_groups(config.frozen)
    trainable = [l for l in model.layers if l.param_names and l.name not in frozen]
    opt = Adam(config.lr, config.decay, decay_mode=config.decay_mode)
    master = RngStream(config.seed)
    shuffle_rng, drop_rng, aug_rng = master.spawn(1), master.spawn(2), master.spawn(3)
    trace: list[EpochStats] = []
    if not trainable:
        log.info("every parameterised layer is frozen; training is a no-op")
    lowest = min((model.layer_index(l.name) for l in trainable), default=None)
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[s:s + config.batch_size]
            x = images[idx]
            if config.augment:
                x = np.stack([augment(img, config.augment_config, aug_rng) for img in x])
            logits = model.forward(x, train=True, rng=drop_rng.spawn(step))
            loss, grad = head_loss(logits, targets[idx], model.head_activation, config.loss)
            if not np.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch} step {step}: loss is {loss}")
            if trainable:
                model.backward(grad.astype(model.dtype), stop=model.layers[lowest].name, input_grad=False)
                params = {f"{l.name}.{p}": l.params[p] for l in trainable for p in l.param_names}
                grads = {f"{l.name}.{p}": l.grads[p] for l in trainable for p in l.param_names}
                opt.step(params, grads)
            total += loss * len(idx)
            seen += len(idx)
            step += 1
        acc = accuracy(model, images, targets) if config.eval_train else None
        trace.append(EpochStats(epoch, step, total / max(seen, 1), acc))
        log.info("epoch %d loss %.5f acc %s", epoch, trace[-1].loss, acc)
        if config.target_accuracy is not None and acc is not None and acc >= config.target_accuracy:
            break
        if config.max_steps is not None and step >= config.max_steps:
            break
    model.meta["epochs"] = model.meta.get("epochs", 0) + len(trace)
    model.meta["seed"] = config.seed
    return trace


def transfer_head(model: Model, units: int, activation: str, rng: RngStream,
                  class_names: Sequence[str] | None = None) -> Model:
    """Copy the trunk of ``model`` and attach a freshly initialised head."""
    spec = replace(model.spec, head_units=units, head_activation=activation)
    fresh = build(spec, rng)
    for src, dst in zip(model.layers, fresh.layers):
        if dst.name != "head":
            dst.params = {k: v.copy() for k, v in src.params.items()}
    meta = {k: v for k, v in model.meta.items() if k not in ("class_names",)}
    meta["source_head"] = [model.spec.head_units, model.spec.head_activation]
    if class_names is not None:
        meta["class_names"] = list(class_names)
    fresh.meta = meta
    return fresh


# --- FXM1 files -------------------------------------------------------------

MAGIC = b"FXM1"
VERSION = 1


def write_fxm(path, kind: str, spec: dict, meta: dict, params: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write magic, version, header length, JSON header, then float32 LE payload."""
    header = {
        "kind": kind,
        "spec": spec,
        "meta": meta,
        "params": [[name, list(a.shape)] for name, a in params],
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        for _, a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_fxm(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ModelFileError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC.decode()!r}")
    if len(blob) < 12:
        raise ModelFileError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ModelFileError(f"{path}: unknown format version {version}, expected {VERSION}")
    if len(blob) < 12 + hlen:
        raise ModelFileError(f"{path}: truncated header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = blob[12 + hlen:]
    expected = 4 * sum(int(np.prod(shape)) for _, shape in header["params"])
    if len(payload) != expected:
        raise ModelFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arrays = []
    offset = 0
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append((name, a.astype(np.float32)))
        offset += 4 * count
    return header, arrays


def save(model: Model, path) -> None:
    write_fxm(path, "cnn", model.spec.to_dict(), model.meta, model.named_parameters())


def load(path) -> Model:
    header, arrays = read_fxm(path)
    if header.get("kind") != "cnn":
        raise ModelFileError(f"{path}: holds a {header.get('kind')!r} model, not a cnn")
    spec = NetworkSpec.from_dict(header["spec"])
    model = Model(spec, spec.make_layers(), header["meta"])
    shape = spec.input_shape
    for layer in model.layers:  # validates the plan before any weights are read
        shape = layer.output_shape(shape)
    _assign(model.layers, arrays, path)
    return model


def _assign(layers: Sequence[Layer], arrays, path) -> None:
    by_name = dict(arrays)
    wanted = [f"{l.name}.{p}" for l in layers for p in l.param_names]
    if wanted != [name for name, _ in arrays]:
        raise ModelFileError(f"{path}: parameter list does not match the declared architecture")
    dtype = get_dtype()
    for layer in layers:
        for p in layer.param_names:
            layer.params[p] = by_name[f"{layer.name}.{p}"].astype(dtype)
        if isinstance(layer, Conv2D):
            layer.in_channels = layer.params["weight"].shape[1]


def clone(model: Model) -> Model:
    return copy.deepcopy(model)
