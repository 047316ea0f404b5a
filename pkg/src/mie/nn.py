"""Per-modality classifier: MLP encoder plus a fixed three-layer head.

Forward, cross-entropy loss, and exact manual backpropagation. The head
is always FC(feature_dim x 256) -> ReLU -> FC(256 x 64) -> FC(64 x c);
the encoder is a small MLP that stands in for a large pretrained
backbone. Forward traces keep every layer's input activations because
the gradient-modification machinery builds covariance from them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ValidationError

__all__ = [
    "Batch",
    "ForwardTrace",
    "GradientSet",
    "LayerParams",
    "ModalityModel",
    "backward",
    "batch_loss",
    "cross_entropy",
    "forward",
    "init_model",
    "load_model",
    "save_model",
]

CHECKPOINT_MAGIC = b"MIE1"
_ACTIVATIONS = ("none", "relu")
# Probabilities are floored here before the log in cross-entropy.
_PROB_FLOOR = 1e-30

Batch = tuple[np.ndarray, np.ndarray]


@dataclass
class LayerParams:
    """One fully connected layer: x @ weights + biases, then activation."""

    weights: np.ndarray  # in_dim x out_dim
    biases: np.ndarray  # out_dim
    activation: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ValidationError("layer weights must be 2-d and biases 1-d")
        if self.weights.shape[1] != self.biases.shape[0]:
            raise ValidationError(
                f"bias length {self.biases.shape[0]} does not match "
                f"weight columns {self.weights.shape[1]}"
            )
        if min(self.weights.shape) < 1:
            raise ValidationError("layer dimensions must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValidationError("layer parameters contain non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class ModalityModel:
    """Encoder layers followed by the fixed three-layer classification head."""

    encoder_layers: list[LayerParams]
    head_layers: list[LayerParams]

    def __post_init__(self):
        if len(self.head_layers) != 3:
            raise ValidationError("head must have exactly three layers")
        h1, h2, h3 = self.head_layers
        if (h1.activation, h2.activation, h3.activation) != ("relu", "none", "none"):
            raise ValidationError("head activations must be (relu, none, none)")
        if h1.out_dim != 256 or h2.in_dim != 256 or h2.out_dim != 64 or h3.in_dim != 64:
            raise ValidationError(
                "head must be shaped (feature_dim x 256), (256 x 64), (64 x c)"
            )
        chain = self.layers
        for prev, nxt in zip(chain, chain[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValidationError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def layers(self) -> list[LayerParams]:
        return list(self.encoder_layers) + list(self.head_layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.head_layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        return self.head_layers[0].in_dim


@dataclass
class ForwardTrace:
    """Everything the backward pass and covariance tracking need.

    layer_inputs[i] is the activation fed into layer i (batch-shaped,
    B x in_dim); logits and prediction mirror the input: 1-d for a single
    sample, 2-d for a batch.
    """

    layer_inputs: list[np.ndarray]
    logits: np.ndarray
    prediction: np.ndarray


@dataclass
class GradientSet:
    """Per-layer weight/bias gradients mirroring a ModalityModel."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]

    def l2_norm(self) -> float:
        """Euclidean norm of all entries flattened together."""
        total = 0.0
        for w, b in zip(self.weight_grads, self.bias_grads):
            total += float(np.sum(w * w)) + float(np.sum(b * b))
        return float(np.sqrt(total))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            weight_grads=[factor * w for w in self.weight_grads],
            bias_grads=[factor * b for b in self.bias_grads],
        )

    def copy(self) -> "GradientSet":
        return GradientSet(
            weight_grads=[w.copy() for w in self.weight_grads],
            bias_grads=[b.copy() for b in self.bias_grads],
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weight_grads) and all(
            np.all(np.isfinite(b)) for b in self.bias_grads
        )


def zero_gradients(model: ModalityModel) -> GradientSet:
    return GradientSet(
        weight_grads=[np.zeros_like(layer.weights) for layer in model.layers],
        bias_grads=[np.zeros_like(layer.biases) for layer in model.layers],
    )


def init_model(
    input_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    feature_dim: int = 64,
    encoder_hidden: int = 128,
) -> ModalityModel:
    """Build a model with fan-based uniform weight init and zero biases."""

    def make(in_dim: int, out_dim: int, activation: str) -> LayerParams:
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        weights = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        return LayerParams(weights=weights, biases=np.zeros(out_dim), activation=activation)

    encoder = [
        make(input_dim, encoder_hidden, "relu"),
        make(encoder_hidden, feature_dim, "none"),
    ]
    head = [
        make(feature_dim, 256, "relu"),
        make(256, 64, "none"),
        make(64, n_classes, "none"),
    ]
    return ModalityModel(encoder_layers=encoder, head_layers=head)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def forward(model: ModalityModel, x) -> ForwardTrace:
    """Run the model, retaining each layer's input activations."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.input_dim:
        raise ValidationError(
            f"input shape {np.asarray(x).shape} does not match model input dim "
            f"{model.input_dim}"
        )
    layer_inputs: list[np.ndarray] = []
    current = arr
    for layer in model.layers:
        layer_inputs.append(current)
        current = current @ layer.weights + layer.biases
        if layer.activation == "relu":
            current = np.maximum(current, 0.0)
    logits = current
    probs = _softmax_rows(logits)
    if single:
        return ForwardTrace(layer_inputs=layer_inputs, logits=logits[0], prediction=probs[0])
    return ForwardTrace(layer_inputs=layer_inputs, logits=logits, prediction=probs)


def _check_one_hot(y: np.ndarray) -> int:
    """Return the hot index, or raise if y is not exactly one-hot."""
    hot = np.flatnonzero(y == 1.0)
    if hot.size != 1 or not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("label vector must be exactly one-hot")
    return int(hot[0])


def cross_entropy(p, y) -> float:
    """-log(p[true class]) with the probability floored at 1e-30."""
    p_arr = np.asarray(p, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    if p_arr.shape != y_arr.shape or p_arr.ndim != 1:
        raise ValidationError("prediction and label must be 1-d and same length")
    if abs(float(p_arr.sum()) - 1.0) > 1e-9 or np.any(p_arr < -1e-12):
        raise ValidationError("prediction is not on the probability simplex")
    true_class = _check_one_hot(y_arr)
    return float(-np.log(max(float(p_arr[true_class]), _PROB_FLOOR)))


def _validate_batch(model: ModalityModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValidationError("batch features and labels must be 2-d")
    if x.shape[0] == 0:
        raise ValidationError("batch is empty")
    if x.shape[0] != y.shape[0]:
        raise ValidationError("batch features and labels disagree on size")
    if x.shape[1] != model.input_dim or y.shape[1] != model.n_classes:
        raise ValidationError("batch shapes do not match model dimensions")
    return x, y


def batch_loss(model: ModalityModel, batch: Batch) -> float:
    """Mean cross-entropy of the batch."""
    x, y = _validate_batch(model, batch)
    probs = forward(model, x).prediction
    rows = np.arange(x.shape[0])
    true_idx = np.argmax(y, axis=1)
    picked = np.maximum(probs[rows, true_idx], _PROB_FLOOR)
    return float(np.mean(-np.log(picked)))


def backward(model: ModalityModel, batch: Batch) -> GradientSet:
    """Exact gradient of batch_loss with respect to every parameter."""
    return _loss_and_gradient(model, batch)[1]


def _loss_and_gradient(model: ModalityModel, batch: Batch) -> tuple[float, GradientSet]:
    x, y = _validate_batch(model, batch)
    n = x.shape[0]
    trace = forward(model, x)
    probs = trace.prediction

    rows = np.arange(n)
    true_idx = np.argmax(y, axis=1)
    picked = np.maximum(probs[rows, true_idx], _PROB_FLOOR)
    loss = float(np.mean(-np.log(picked)))

    layers = model.layers
    # Softmax + cross-entropy fuse to (p - y) at the logits; the final
    # layer has no activation, so this is also the pre-activation delta.
    delta = (probs - y) / n
    weight_grads: list[np.ndarray | None] = [None] * len(layers)
    bias_grads: list[np.ndarray | None] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        inputs = trace.layer_inputs[i]
        weight_grads[i] = inputs.T @ delta
        bias_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layers[i].weights.T
            if layers[i - 1].activation == "relu":
                # ReLU output is positive exactly where its input was.
                delta = delta * (inputs > 0.0)
    return loss, GradientSet(weight_grads=weight_grads, bias_grads=bias_grads)


def save_model(model: ModalityModel, path) -> None:
    """Write the checkpoint: magic, layer counts, then per-layer blocks.

    Per layer (encoder first, then head, in declaration order):
    u32 in_dim, u32 out_dim, u8 activation tag, raw little-endian float64
    weights (row-major) and biases.
    """
    parts = [CHECKPOINT_MAGIC]
    parts.append(struct.pack("<II", len(model.encoder_layers), len(model.head_layers)))
    for layer in model.layers:
        parts.append(
            struct.pack(
                "<IIB", layer.in_dim, layer.out_dim, _ACTIVATIONS.index(layer.activation)
            )
        )
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise DataFormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk


def load_model(path) -> ModalityModel:
    """Read a checkpoint written by save_model."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}")
        reader = _Reader(fh.read(), path)
    n_encoder, n_head = struct.unpack("<II", reader.take(8, "layer counts"))
    layers = []
    for i in range(n_encoder + n_head):
        in_dim, out_dim, act = struct.unpack("<IIB", reader.take(9, f"layer {i} header"))
        if act >= len(_ACTIVATIONS) or in_dim < 1 or out_dim < 1:
            raise DataFormatError(f"{path}: invalid layer {i} header")
        w = np.frombuffer(
            reader.take(8 * in_dim * out_dim, f"layer {i} weights"), dtype="<f8"
        ).reshape(in_dim, out_dim)
        b = np.frombuffer(reader.take(8 * out_dim, f"layer {i} biases"), dtype="<f8")
        layers.append(
            LayerParams(weights=w.copy(), biases=b.copy(), activation=_ACTIVATIONS[act])
        )
    if reader.pos != len(reader.blob):
        raise DataFormatError(f"{path}: trailing bytes after final layer")
    try:
        return ModalityModel(encoder_layers=layers[:n_encoder], head_layers=layers[n_encoder:])
    except ValidationError as exc:
        raise DataFormatError(f"{path}: inconsistent checkpoint: {exc}") from exc
