"""Dense numeric core: a small split MLP with manual backprop and SGD.

A model is two stacks of dense layers: ``features`` maps raw inputs to a
d-dimensional embedding, ``head`` maps embeddings to class logits. Hidden
layers are ReLU; the embedding output and the head are linear. Everything is
float64. Forward and backward passes are pure functions of their inputs;
``sgd_step`` returns fresh model/optimizer values instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, NumericError

RELU = "relu"
LINEAR = "linear"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrads:
    """Per-layer arrays shaped like a DenseLayer's parameters.

    Also used for optimizer velocity buffers, which share the pairing.
    """

    weights: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    features: list[DenseLayer]  # input -> embedding
    head: list[DenseLayer]  # embedding -> logits
    embedding_dim: int

    @property
    def input_dim(self) -> int:
        return self.features[0].weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head[-1].weights.shape[1]

    def layers(self) -> list[DenseLayer]:
        return self.features + self.head

    @property
    def param_count(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers())

    def parameter_arrays(self):
        """Yield parameter arrays in a fixed order (views, not copies)."""
        for layer in self.layers():
            yield layer.weights
            yield layer.bias

    def copy(self) -> "Model":
        return Model(
            [layer.copy() for layer in self.features],
            [layer.copy() for layer in self.head],
            self.embedding_dim,
        )


@dataclass
class Gradients:
    features: list[LayerGrads]
    head: list[LayerGrads]

    def per_layer(self) -> list[LayerGrads]:
        return self.features + self.head

    def arrays(self):
        for grad in self.per_layer():
            yield grad.weights
            yield grad.bias

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, input_dim)
    labels: np.ndarray  # (batch,)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2:
            raise DataError(f"batch inputs must be 2-d, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DataError(
                f"label count {self.labels.shape} does not match input rows {self.inputs.shape[0]}"
            )
        if self.inputs.shape[0] < 1:
            raise DataError("batch must contain at least one sample")


@dataclass
class OptimizerState:
    """SGD with momentum and decoupled-from-nothing weight decay (L2 in the velocity)."""

    lr: float
    momentum: float
    weight_decay: float
    velocity: list[LayerGrads]

    @classmethod
    def init(cls, model: Model, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigurationError(f"weight decay must be >= 0, got {weight_decay}")
        velocity = [
            LayerGrads(np.zeros_like(layer.weights), np.zeros_like(layer.bias))
            for layer in model.layers()
        ]
        return cls(lr, momentum, weight_decay, velocity)


def init_model(layer_dims: list[int], embedding_dim: int, num_classes: int, seed: int) -> Model:
    """Build a deterministic model.

    ``layer_dims`` lists the feature-extractor widths from the input
    dimension down to the embedding output, e.g. [16, 64, 32] is a 16-input,
    one-hidden-layer extractor with a 32-d embedding. The classifier head is
    a single linear layer. Weights and biases are uniform in
    [-1/sqrt(fan_in), 1/sqrt(fan_in)); the same seed yields a bitwise
    identical model.
    """
    if not layer_dims:
        raise ConfigurationError("layer_dims must be nonempty")
    for dim in list(layer_dims) + [embedding_dim, num_classes]:
        if int(dim) <= 0:
            raise ConfigurationError(f"all dimensions must be positive, got {dim}")
    if len(layer_dims) < 2:
        raise ConfigurationError("layer_dims needs an input and an output width")
    if layer_dims[-1] != embedding_dim:
        raise ConfigurationError(
            f"last feature width {layer_dims[-1]} must equal embedding_dim {embedding_dim}"
        )

    rng = np.random.default_rng(int(seed))

    def dense(fan_in: int, fan_out: int, activation: str) -> DenseLayer:
        scale = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        bias = rng.uniform(-scale, scale, size=fan_out)
        return DenseLayer(weights, bias, activation)

    features = []
    for i in range(len(layer_dims) - 1):
        activation = LINEAR if i == len(layer_dims) - 2 else RELU
        features.append(dense(layer_dims[i], layer_dims[i + 1], activation))
    head = [dense(embedding_dim, num_classes, LINEAR)]
    return Model(features, head, int(embedding_dim))


def _stack_forward(layers: list[DenseLayer], x: np.ndarray):
    """Forward through a layer stack; returns (inputs per layer, pre-activations, output)."""
    acts = [x]
    pres = []
    out = x
    for layer in layers:
        z = out @ layer.weights + layer.bias
        pres.append(z)
        out = np.maximum(z, 0.0) if layer.activation == RELU else z
        acts.append(out)
    return acts, pres, out


def _check_width(name: str, array: np.ndarray, width: int) -> np.ndarray:
    array = np.asarray(array, dtype=float)
    if array.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {array.shape}")
    if array.shape[1] != width:
        raise DimensionError(f"{name} has width {array.shape[1]}, expected {width}")
    return array


def forward_features(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Embed a batch of raw inputs: (batch, p) -> (batch, d)."""
    inputs = _check_width("inputs", inputs, model.input_dim)
    return _stack_forward(model.features, inputs)[2]


def forward_logits(model: Model, embeddings: np.ndarray) -> np.ndarray:
    """Map embeddings to class logits: (batch, d) -> (batch, |C|)."""
    embeddings = _check_width("embeddings", embeddings, model.embedding_dim)
    return _stack_forward(model.head, embeddings)[2]


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    The gradient is of the *mean* loss, so its rows are (softmax - onehot)/n
    and each row sums to zero.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got shape {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DataError("labels must be 1-d and match the logit rows")
    n, num_classes = logits.shape
    if n == 0:
        raise DataError("cross_entropy needs at least one sample")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == labels.astype(int)):
            raise DataError("labels must be integers")
        labels = labels.astype(int)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]"
        )

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(probs[rows, labels])))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def _stack_backward(layers: list[DenseLayer], acts, pres, d_out: np.ndarray):
    """Backprop through a stack; returns (per-layer grads, grad w.r.t. stack input)."""
    grads: list[LayerGrads] = [None] * len(layers)  # type: ignore[list-item]
    d = d_out
    for i in reversed(range(len(layers))):
        dz = d * (pres[i] > 0) if layers[i].activation == RELU else d
        grads[i] = LayerGrads(acts[i].T @ dz, dz.sum(axis=0))
        d = dz @ layers[i].weights.T
    return grads, d


def backward(model: Model, batch: Batch, extra_grad_on_embedding: np.ndarray | None = None) -> Gradients:
    """Gradients of the mean cross-entropy on ``batch`` w.r.t. all parameters.

    ``extra_grad_on_embedding``, when given, is an additional (batch, d)
    gradient on the embeddings (an embedding-level regularizer term). It is
    chained through the feature extractor only; the head sees just the
    cross-entropy path.
    """
    inputs = _check_width("batch inputs", batch.inputs, model.input_dim)
    f_acts, f_pres, h = _stack_forward(model.features, inputs)
    g_acts, g_pres, logits = _stack_forward(model.head, h)
    _, d_logits = cross_entropy(logits, batch.labels)
    head_grads, d_h = _stack_backward(model.head, g_acts, g_pres, d_logits)
    if extra_grad_on_embedding is not None:
        extra = np.asarray(extra_grad_on_embedding, dtype=float)
        if extra.shape != h.shape:
            raise DimensionError(
                f"extra embedding gradient has shape {extra.shape}, expected {h.shape}"
            )
        d_h = d_h + extra
    feature_grads, _ = _stack_backward(model.features, f_acts, f_pres, d_h)
    return Gradients(feature_grads, head_grads)


def sgd_step(model: Model, grads: Gradients, opt: OptimizerState):
    """One SGD step: v <- momentum*v + g + weight_decay*p; p <- p - lr*v.

    Returns (new Model, new OptimizerState); inputs are left untouched.
    """
    layers = model.layers()
    grad_list = grads.per_layer()
    if len(grad_list) != len(layers) or len(opt.velocity) != len(layers):
        raise DimensionError("gradient/velocity layer count does not match the model")
    for layer, g, v in zip(layers, grad_list, opt.velocity):
        if g.weights.shape != layer.weights.shape or g.bias.shape != layer.bias.shape:
            raise DimensionError(
                f"gradient shape {g.weights.shape}/{g.bias.shape} does not match "
                f"parameter shape {layer.weights.shape}/{layer.bias.shape}"
            )
        if v.weights.shape != layer.weights.shape or v.bias.shape != layer.bias.shape:
            raise DimensionError("velocity shapes do not match parameter shapes")
        if not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.bias))):
            raise NumericError("non-finite gradient")

    new_layers: list[DenseLayer] = []
    new_velocity: list[LayerGrads] = []
    for layer, g, v in zip(layers, grad_list, opt.velocity):
        vw = opt.momentum * v.weights + g.weights + opt.weight_decay * layer.weights
        vb = opt.momentum * v.bias + g.bias + opt.weight_decay * layer.bias
        w = layer.weights - opt.lr * vw
        b = layer.bias - opt.lr * vb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite parameter after update")
        new_layers.append(DenseLayer(w, b, layer.activation))
        new_velocity.append(LayerGrads(vw, vb))

    split = len(model.features)
    new_model = Model(new_layers[:split], new_layers[split:], model.embedding_dim)
    new_opt = OptimizerState(opt.lr, opt.momentum, opt.weight_decay, new_velocity)
    return new_model, new_opt
