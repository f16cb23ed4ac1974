"""Bias-free ReLU convnets: architecture specs, tracing, training, persistence.

A model is a ModelSpec (ordered layer list) plus a dict of float32 weight
tensors keyed by layer name. Names follow the conv1.conv / conv1.relu /
fc1 scheme so analysis reports read naturally layer by layer.

Forward tracing never applies dropout; dropout is a training-only layer.
"""

from __future__ import annotations

import functools
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ArgumentError, FormatError, NumericalError, ShapeError, SpecError

_MAGIC = b"NPSC"
_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network; unused fields stay at their zero defaults."""

    kind: str  # conv | relu | maxpool | dropout | flatten | fc
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    out_features: int = 0
    rate: float = 0.0


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride)


def dropout(rate: float = 0.25) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def fc(out_features: int) -> LayerSpec:
    return LayerSpec("fc", out_features=out_features)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # [C,H,W]
    num_classes: int
    layers: tuple[LayerSpec, ...]


class ResolvedLayer(NamedTuple):
    spec: LayerSpec
    name: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


@functools.lru_cache(maxsize=64)
def resolve(spec: ModelSpec) -> tuple[ResolvedLayer, ...]:
    """Assign names and propagate shapes; raises SpecError if layers don't compose."""
    if len(spec.input_shape) != 3 or any(d < 1 for d in spec.input_shape):
        raise SpecError(f"input shape must be [C,H,W] positive, got {spec.input_shape}")
    if spec.num_classes < 2:
        raise SpecError(f"need at least 2 classes, got {spec.num_classes}")
    counters = {"conv": 0, "maxpool": 0, "dropout": 0, "flatten": 0, "fc": 0, "relu": 0}
    out: list[ResolvedLayer] = []
    shape: tuple[int, ...] = spec.input_shape
    prev_name = ""
    prev_kind = ""
    for layer in spec.layers:
        k = layer.kind
        if k == "conv":
            if len(shape) != 3:
                raise SpecError(f"conv needs a [C,H,W] input, got {shape}")
            if layer.out_channels < 1 or layer.kernel < 1:
                raise SpecError(f"bad conv geometry: {layer}")
            oh, ow = ops.conv_output_hw(shape[1], shape[2], layer.kernel, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise SpecError(f"conv collapses {shape} to {(layer.out_channels, oh, ow)}")
            counters["conv"] += 1
            name = f"conv{counters['conv']}.conv"
            new_shape: tuple[int, ...] = (layer.out_channels, oh, ow)
        elif k == "relu":
            if prev_kind == "conv":
                name = prev_name.replace(".conv", ".relu")
            elif prev_kind == "fc":
                name = f"{prev_name}.relu"
            else:
                counters["relu"] += 1
                name = f"relu{counters['relu']}"
            new_shape = shape
        elif k == "maxpool":
            if len(shape) != 3:
                raise SpecError(f"maxpool needs a [C,H,W] input, got {shape}")
            if layer.window < 1 or layer.window > min(shape[1], shape[2]):
                raise SpecError(f"pool window {layer.window} does not fit {shape}")
            oh = (shape[1] - layer.window) // layer.stride + 1
            ow = (shape[2] - layer.window) // layer.stride + 1
            counters["maxpool"] += 1
            name = f"pool{counters['maxpool']}"
            new_shape = (shape[0], oh, ow)
        elif k == "dropout":
            if not 0.0 <= layer.rate < 1.0:
                raise SpecError(f"dropout rate must be in [0,1), got {layer.rate}")
            counters["dropout"] += 1
            name = f"dropout{counters['dropout']}"
            new_shape = shape
        elif k == "flatten":
            counters["flatten"] += 1
            name = f"flatten{counters['flatten']}"
            new_shape = (int(np.prod(shape)),)
        elif k == "fc":
            if len(shape) != 1:
                raise SpecError(f"fc needs a flat input, got {shape}; add a flatten layer")
            if layer.out_features < 1:
                raise SpecError(f"bad fc width: {layer}")
            counters["fc"] += 1
            name = f"fc{counters['fc']}"
            new_shape = (layer.out_features,)
        else:
            raise SpecError(f"unknown layer kind {layer.kind!r}")
        out.append(ResolvedLayer(layer, name, shape, new_shape))
        shape = new_shape
        prev_name, prev_kind = name, k
    if not out:
        raise SpecError("model has no layers")
    if shape != (spec.num_classes,):
        raise SpecError(f"final layer produces {shape}, expected ({spec.num_classes},)")
    return tuple(out)


def layer_names(spec: ModelSpec) -> list[str]:
    return [r.name for r in resolve(spec)]


def layer_output_shape(spec: ModelSpec, name: str) -> tuple[int, ...]:
    for r in resolve(spec):
        if r.name == name:
            return r.out_shape
    raise ArgumentError(f"no layer named {name!r}; known: {', '.join(layer_names(spec))}")


def _param_shape(r: ResolvedLayer) -> tuple[int, ...] | None:
    if r.spec.kind == "conv":
        return (r.spec.out_channels, r.in_shape[0], r.spec.kernel, r.spec.kernel)
    if r.spec.kind == "fc":
        return (r.spec.out_features, r.in_shape[0])
    return None


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    return {r.name: s for r in resolve(spec) if (s := _param_shape(r)) is not None}


def build_model(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """He-style init: zero-mean normal with std sqrt(2/fan_in), float32."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        fan_in = int(np.prod(shape[1:]))
        std = math.sqrt(2.0 / fan_in)
        weights[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return weights


def _check_weights(weights: dict[str, np.ndarray], spec: ModelSpec) -> None:
    expected = param_shapes(spec)
    got = {k: tuple(v.shape) for k, v in weights.items()}
    if got != expected:
        raise ShapeError(f"weight shapes {got} do not match spec {expected}")


@dataclass
class ForwardTrace:
    """Every layer's output (dropout inactive), pool routings, and the input."""

    input: np.ndarray
    names: list[str]
    outputs: dict[str, np.ndarray]
    routings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[self.names[-1]]

    def output(self, name: str) -> np.ndarray:
        if name not in self.outputs:
            raise ArgumentError(f"no layer named {name!r}; known: {', '.join(self.names)}")
        return self.outputs[name]

    def pre_activation(self, name: str) -> np.ndarray:
        """The tensor that fed the named layer (the previous layer's output)."""
        i = self.names.index(name) if name in self.outputs else -1
        if i < 0:
            raise ArgumentError(f"no layer named {name!r}; known: {', '.join(self.names)}")
        return self.input if i == 0 else self.outputs[self.names[i - 1]]


def _apply_layer(r: ResolvedLayer, weights: dict[str, np.ndarray], x: np.ndarray):
    """Single-sample inference step; returns (output, routing-or-None)."""
    s = r.spec
    if s.kind == "conv":
        return ops.conv2d_forward(x, weights[r.name], s.stride, s.padding), None
    if s.kind == "relu":
        return ops.relu_forward(x), None
    if s.kind == "maxpool":
        y, routing = ops.maxpool_forward(x, s.window, s.stride)
        return y, routing
    if s.kind == "dropout":
        return x, None
    if s.kind == "flatten":
        return x.reshape(-1), None
    return ops.fc_forward(x, weights[r.name]), None


def forward(weights: dict[str, np.ndarray], spec: ModelSpec, x: np.ndarray) -> ForwardTrace:
    """Trace a single [C,H,W] input through the network (dropout inactive)."""
    resolved = resolve(spec)
    _check_weights(weights, spec)
    x = np.asarray(x)
    if tuple(x.shape) != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match spec {spec.input_shape}")
    trace = ForwardTrace(input=x, names=[r.name for r in resolved], outputs={})
    cur = x
    for r in resolved:
        cur, routing = _apply_layer(r, weights, cur)
        trace.outputs[r.name] = cur
        if routing is not None:
            trace.routings[r.name] = routing
    return trace


def forward_from_layer(
    weights: dict[str, np.ndarray], spec: ModelSpec, layer: str, activation: np.ndarray
) -> np.ndarray:
    """Resume inference just after `layer`, using `activation` as its output."""
    resolved = resolve(spec)
    names = [r.name for r in resolved]
    if layer not in names:
        raise ArgumentError(f"no layer named {layer!r}; known: {', '.join(names)}")
    i = names.index(layer)
    cur = np.asarray(activation)
    if tuple(cur.shape) != resolved[i].out_shape:
        raise ShapeError(f"activation shape {cur.shape} != {layer} output {resolved[i].out_shape}")
    for r in resolved[i + 1:]:
        cur, _ = _apply_layer(r, weights, cur)
    return cur


def gradient_wrt_layer(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    trace: ForwardTrace,
    layer: str,
    class_index: int,
) -> np.ndarray:
    """d(logit of class_index) / d(output of `layer`), via reverse sweep."""
    resolved = resolve(spec)
    names = [r.name for r in resolved]
    if layer not in names:
        raise ArgumentError(f"no layer named {layer!r}; known: {', '.join(names)}")
    if not 0 <= class_index < spec.num_classes:
        raise ArgumentError(f"class {class_index} out of range for {spec.num_classes} classes")
    stop = names.index(layer)
    grad = np.zeros(spec.num_classes, dtype=trace.logits.dtype)
    grad[class_index] = 1
    for i in range(len(resolved) - 1, stop, -1):
        r = resolved[i]
        x_in = trace.pre_activation(r.name)
        s = r.spec
        if s.kind == "conv":
            grad, _ = ops.conv2d_backward(x_in, weights[r.name], s.stride, s.padding, grad)
        elif s.kind == "relu":
            grad = ops.relu_backward(x_in, grad)
        elif s.kind == "maxpool":
            grad = ops.maxpool_backward(x_in.shape, trace.routings[r.name], grad)
        elif s.kind == "flatten":
            grad = grad.reshape(x_in.shape)
        elif s.kind == "fc":
            grad, _ = ops.fc_backward(x_in, weights[r.name], grad)
        # dropout: identity at inference
    return grad


# --- batched training path ---

def _forward_batch(weights, spec, xb, train=False, drop_rng=None):
    """Batched forward; returns (logits, cache) where cache feeds _backward_batch."""
    cache = []
    cur = xb
    for r in resolve(spec):
        s = r.spec
        entry = {"layer": r, "x": cur}
        if s.kind == "conv":
            cur = ops.conv2d_forward_batch(cur, weights[r.name], s.stride, s.padding)
        elif s.kind == "relu":
            cur = ops.relu_forward(cur)
        elif s.kind == "maxpool":
            cur, routing = ops.maxpool_forward_batch(cur, s.window, s.stride)
            entry["routing"] = routing
        elif s.kind == "dropout":
            if train and s.rate > 0.0:
                mask = (drop_rng.random(cur.shape) >= s.rate).astype(cur.dtype)
                mask /= np.float32(1.0 - s.rate)
                cur = cur * mask
                entry["mask"] = mask
        elif s.kind == "flatten":
            cur = cur.reshape(cur.shape[0], -1)
        else:
            cur = ops.fc_forward_batch(cur, weights[r.name])
        cache.append(entry)
    return cur, cache


def _backward_batch(weights, cache, grad_logits):
    """Reverse sweep over a batch cache; returns summed parameter gradients."""
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    for entry in reversed(cache):
        r = entry["layer"]
        s = r.spec
        x_in = entry["x"]
        if s.kind == "conv":
            g, gw = ops.conv2d_backward_batch(x_in, weights[r.name], s.stride, s.padding, g)
            grads[r.name] = gw
        elif s.kind == "relu":
            g = ops.relu_backward(x_in, g)
        elif s.kind == "maxpool":
            g = ops.maxpool_backward_batch(x_in.shape, entry["routing"], g)
        elif s.kind == "dropout":
            if "mask" in entry:
                g = g * entry["mask"]
        elif s.kind == "flatten":
            g = g.reshape(x_in.shape)
        else:
            g, gw = ops.fc_backward_batch(x_in, weights[r.name], g)
            grads[r.name] = gw
    return grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    dropout_active: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError(f"epochs/batch size must be >= 1, got {self.epochs}/{self.batch_size}")


def train_sgd(weights, spec, dataset, config: TrainConfig):
    """Plain SGD over shuffled minibatches; returns (new weights, epoch mean losses).

    Deterministic given config.seed. Aborts with NumericalError on NaN loss.
    """
    _check_weights(weights, spec)
    images, labels = dataset.images, dataset.labels
    n = len(labels)
    if n == 0:
        raise ArgumentError("empty dataset")
    if labels.max() >= spec.num_classes:
        raise ArgumentError(f"label {labels.max()} out of range for {spec.num_classes} classes")
    w = {k: v.copy() for k, v in weights.items()}
    shuffle_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1)
    lr = config.learning_rate
    history = []
    for _epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = images[idx]
            logits, cache = _forward_batch(w, spec, xb, train=config.dropout_active, drop_rng=drop_rng)
            losses, grad_logits = ops.softmax_cross_entropy_batch(logits, labels[idx])
            loss = float(losses.mean())
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {_epoch}, sample offset {start}")
            epoch_loss += loss * len(idx)
            grads = _backward_batch(w, cache, grad_logits / np.float32(len(idx)))
            for name, gw in grads.items():
                w[name] -= np.float32(lr) * gw
        history.append(epoch_loss / n)
    return w, history


def predict_batch(weights, spec, images, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties break to the lowest class index."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = _forward_batch(weights, spec, images[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(weights, spec, dataset, batch_size: int = 256) -> float:
    if len(dataset.labels) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    preds = predict_batch(weights, spec, dataset.images, batch_size)
    return float(np.mean(preds == dataset.labels))


# --- persistence ---

def _layer_to_json(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind}
    if layer.kind == "conv":
        d.update(out_channels=layer.out_channels, kernel=layer.kernel,
                 stride=layer.stride, padding=layer.padding)
    elif layer.kind == "maxpool":
        d.update(window=layer.window, stride=layer.stride)
    elif layer.kind == "dropout":
        d.update(rate=layer.rate)
    elif layer.kind == "fc":
        d.update(out_features=layer.out_features)
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    kind = d.get("kind")
    try:
        if kind == "conv":
            return LayerSpec("conv", out_channels=int(d["out_channels"]), kernel=int(d["kernel"]),
                             stride=int(d["stride"]), padding=int(d["padding"]))
        if kind == "maxpool":
            return LayerSpec("maxpool", window=int(d["window"]), stride=int(d["stride"]))
        if kind == "dropout":
            return LayerSpec("dropout", rate=float(d["rate"]))
        if kind in ("relu", "flatten", "fc"):
            if kind == "fc":
                return LayerSpec("fc", out_features=int(d["out_features"]))
            return LayerSpec(kind)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad layer entry {d!r}: {e}") from e
    raise FormatError(f"unknown layer kind {kind!r} in model header")


def serialize_model(weights: dict[str, np.ndarray], spec: ModelSpec) -> bytes:
    """NPSC container: magic, version byte, u32-LE length-prefixed JSON header,
    then each tensor as raw little-endian float32 in layer (declaration) order."""
    _check_weights(weights, spec)
    order = [r.name for r in resolve(spec) if _param_shape(r) is not None]
    header = {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": [_layer_to_json(l) for l in spec.layers],
        "tensors": [{"name": n, "shape": list(weights[n].shape)} for n in order],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(bytes([_VERSION]))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in order:
        buf.write(np.ascontiguousarray(weights[n], dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(weights: dict[str, np.ndarray], spec: ModelSpec, path) -> None:
    data = serialize_model(weights, spec)
    with open(path, "wb") as f:
        f.write(data)


def load_model(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 9 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    if data[4] != _VERSION:
        raise FormatError(f"{path}: unsupported model version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    if 9 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from e
    try:
        spec = ModelSpec(
            input_shape=tuple(int(v) for v in header["input_shape"]),
            num_classes=int(header["num_classes"]),
            layers=tuple(_layer_from_json(l) for l in header["layers"]),
        )
        tensor_entries = [(str(t["name"]), tuple(int(v) for v in t["shape"]))
                          for t in header["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed header: {e}") from e
    try:
        expected = param_shapes(spec)
    except SpecError as e:
        raise FormatError(f"{path}: header spec does not compose: {e}") from e
    if dict(tensor_entries) != expected:
        raise FormatError(f"{path}: tensor table {tensor_entries} does not match spec {expected}")
    weights: dict[str, np.ndarray] = {}
    off = 9 + hlen
    for name, shape in tensor_entries:
        nbytes = int(np.prod(shape)) * 4
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated tensor {name}")
        weights[name] = np.frombuffer(data[off:off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after tensors")
    return spec, weights


def model_digest(weights: dict[str, np.ndarray], spec: ModelSpec) -> str:
    return hashlib.sha256(serialize_model(weights, spec)).hexdigest()


# --- stock architectures ---

def reference_spec(in_channels: int = 1, image_hw: int = 28, channels: int = 32,
                   num_classes: int = 10) -> ModelSpec:
    """Five 3x3 same-padding conv blocks, one 2x2 pool, dropout, one fc head."""
    layers = []
    for _ in range(5):
        layers += [conv(channels), relu()]
    layers += [maxpool(2, 2), dropout(0.25), flatten(), fc(num_classes)]
    return ModelSpec((in_channels, image_hw, image_hw), num_classes, tuple(layers))


def desk_spec(in_channels: int = 1, image_hw: int = 28, channels: int = 8,
              num_classes: int = 10) -> ModelSpec:
    """Small profile for laptop-scale runs: three conv blocks, same head."""
    layers = []
    for _ in range(3):
        layers += [conv(channels), relu()]
    layers += [maxpool(2, 2), dropout(0.25), flatten(), fc(num_classes)]
    return ModelSpec((in_channels, image_hw, image_hw), num_classes, tuple(layers))


def desk_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(learning_rate=0.06, epochs=10, batch_size=64, seed=seed)


def reference_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(learning_rate=0.001, epochs=100, batch_size=64, seed=seed)
