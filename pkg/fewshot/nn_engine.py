"""Dense network engine: forward pass, losses, analytic gradients and update clipping.

Every other module trains, perturbs or fuses the ``ParameterStore`` defined here.
Arrays are float64 throughout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, LabelError, ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
PROBABILITY_FLOOR = 1e-12

LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class LayerBlock:
    """A weight/bias pair of arrays shaped like one layer."""

    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LayerBlock":
        return LayerBlock(self.weight.copy(), self.bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    @property
    def shapes(self) -> Tuple[tuple, tuple]:
        return self.weight.shape, self.bias.shape


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    tunable: bool = True

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def block(self) -> LayerBlock:
        return LayerBlock(self.weight, self.bias)


class ParameterStore:
    """Ordered dense layers; the last one is the linear classifier head."""

    def __init__(self, layers: Sequence[Layer]) -> None:
        if not layers:
            raise ShapeError("A network needs at least one layer.")
        self.layers: List[Layer] = []
        for index, layer in enumerate(layers):
            weight = np.array(layer.weight, dtype=np.float64, ndmin=2)
            bias = np.array(layer.bias, dtype=np.float64).reshape(-1)
            if bias.shape != (weight.shape[0],):
                raise ShapeError(
                    f"Layer {index}: bias has {bias.shape[0]} entries for {weight.shape[0]} outputs."
                )
            self.layers.append(Layer(weight, bias, bool(layer.tunable)))
        for index, (lower, upper) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if lower.out_dim != upper.in_dim:
                raise ShapeError(
                    f"Layer {index} emits {lower.out_dim} units but layer {index + 1} expects {upper.in_dim}."
                )

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: np.random.Generator) -> "ParameterStore":
        """Glorot-uniform weights and zero biases for the layer widths in ``dims``."""
        if len(dims) < 2 or any(int(width) < 1 for width in dims):
            raise ConfigError(f"Invalid layer widths {list(dims)}.")
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(int(fan_out), int(fan_in)))
            layers.append(Layer(weight, np.zeros(int(fan_out))))
        return cls(layers)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].in_dim

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def clone(self) -> "ParameterStore":
        return ParameterStore(
            [Layer(layer.weight.copy(), layer.bias.copy(), layer.tunable) for layer in self.layers]
        )

    snapshot = clone

    def blocks(self) -> List[LayerBlock]:
        """Live views of every layer's arrays."""
        return [layer.block() for layer in self.layers]

    def is_finite(self) -> bool:
        return all(np.isfinite(block.flat()).all() for block in self.blocks())

    def equals(self, other: "ParameterStore") -> bool:
        if self.layer_count != other.layer_count:
            return False
        return all(
            mine.weight.shape == theirs.weight.shape
            and np.array_equal(mine.weight, theirs.weight)
            and np.array_equal(mine.bias, theirs.bias)
            for mine, theirs in zip(self.layers, other.layers)
        )

    def set_all_tunable(self, tunable: bool = True) -> None:
        for layer in self.layers:
            layer.tunable = tunable

    def set_tunable_top(self, backbone_layers: int) -> None:
        """Make the head plus the top ``backbone_layers`` hidden layers tunable; freeze the rest."""
        if backbone_layers < 0:
            raise ConfigError("tunable_top_layers must be non-negative.")
        cut = max(0, self.layer_count - 1 - backbone_layers)
        for index, layer in enumerate(self.layers):
            layer.tunable = index >= cut

    def with_head(self, weight: np.ndarray, bias: np.ndarray) -> "ParameterStore":
        """Copy of the store whose head is replaced by ``weight``/``bias``."""
        layers = [Layer(layer.weight.copy(), layer.bias.copy(), layer.tunable) for layer in self.layers[:-1]]
        layers.append(Layer(np.array(weight, dtype=np.float64), np.array(bias, dtype=np.float64), self.head.tunable))
        return ParameterStore(layers)


class GradientStore:
    """Shape-congruent mirror of a ParameterStore holding one array pair per layer."""

    def __init__(self, blocks: Sequence[LayerBlock]) -> None:
        self.blocks: List[LayerBlock] = list(blocks)

    @classmethod
    def zeros_like(cls, model: ParameterStore) -> "GradientStore":
        return cls([LayerBlock(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in model.layers])

    def __iter__(self) -> Iterator[LayerBlock]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, index: int) -> LayerBlock:
        return self.blocks[index]

    def scaled(self, factor: float) -> "GradientStore":
        return GradientStore([LayerBlock(block.weight * factor, block.bias * factor) for block in self.blocks])

    def max_abs(self) -> float:
        return max((float(np.abs(block.flat()).max(initial=0.0)) for block in self.blocks), default=0.0)

    def is_finite(self) -> bool:
        return all(np.isfinite(block.flat()).all() for block in self.blocks)

    def matches(self, model: ParameterStore) -> bool:
        return len(self.blocks) == model.layer_count and all(
            block.shapes == (layer.weight.shape, layer.bias.shape)
            for block, layer in zip(self.blocks, model.layers)
        )


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.array(self.inputs, dtype=np.float64, ndmin=2)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] < 1:
            raise ShapeError("A batch needs at least one row.")
        if labels.shape[0] != inputs.shape[0]:
            raise ShapeError(f"{inputs.shape[0]} input rows but {labels.shape[0]} labels.")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardTrace:
    """Activations (``activations[k]`` feeds layer k) and pre-activations of one pass."""

    activations: List[np.ndarray]
    preactivations: List[np.ndarray]

    @property
    def embeddings(self) -> np.ndarray:
        return self.activations[-2]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


def _leaky(values: np.ndarray) -> np.ndarray:
    return np.where(values > 0, values, LEAKY_SLOPE * values)


def _leaky_slope(values: np.ndarray) -> np.ndarray:
    return np.where(values > 0, 1.0, LEAKY_SLOPE)


def trace_forward(model: ParameterStore, inputs: np.ndarray) -> ForwardTrace:
    activation = np.array(inputs, dtype=np.float64, ndmin=2)
    if activation.shape[1] != model.input_dim:
        raise ShapeError(f"Input has {activation.shape[1]} features; the network expects {model.input_dim}.")
    activations = [activation]
    preactivations = []
    last = model.layer_count - 1
    for index, layer in enumerate(model.layers):
        preactivation = activation @ layer.weight.T + layer.bias
        preactivations.append(preactivation)
        activation = preactivation if index == last else _leaky(preactivation)
        activations.append(activation)
    return ForwardTrace(activations, preactivations)


def forward(model: ParameterStore, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(embeddings, logits)``: penultimate activations and head outputs."""
    trace = trace_forward(model, inputs)
    return trace.embeddings, trace.logits


def embed(model: ParameterStore, inputs: np.ndarray) -> np.ndarray:
    return trace_forward(model, inputs).embeddings


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exponentials = np.exp(shifted)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its exact gradient with respect to the logits."""
    logits = np.array(logits, dtype=np.float64, ndmin=2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels.")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelError(f"Labels must lie in [0, {logits.shape[1]}); got range [{labels.min()}, {labels.max()}].")
    rows = np.arange(logits.shape[0])
    log_probs = log_softmax(logits)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits /= logits.shape[0]
    return loss, dlogits


def _kl_terms(p_logits: np.ndarray, q_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p_logits = np.array(p_logits, dtype=np.float64, ndmin=2)
    q_logits = np.array(q_logits, dtype=np.float64, ndmin=2)
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"KL operands differ in shape: {p_logits.shape} vs {q_logits.shape}.")
    p = softmax(p_logits)
    log_ratio = np.log(np.maximum(p, PROBABILITY_FLOOR)) - np.log(np.maximum(softmax(q_logits), PROBABILITY_FLOOR))
    return p, log_ratio, (p * log_ratio).sum(axis=1)


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Batch mean of KL(P||Q) with P, Q the softmax of each logit row."""
    _, _, per_row = _kl_terms(p_logits, q_logits)
    return max(0.0, float(per_row.mean()))


def kl_divergence_with_grad(p_logits: np.ndarray, q_logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """KL(P||Q) and its gradient with respect to ``p_logits`` (Q held fixed)."""
    p, log_ratio, per_row = _kl_terms(p_logits, q_logits)
    grad = p * (log_ratio - per_row[:, None]) / p.shape[0]
    return max(0.0, float(per_row.mean())), grad


def backpropagate(
    model: ParameterStore,
    trace: ForwardTrace,
    dlogits: Optional[np.ndarray] = None,
    dembeddings: Optional[np.ndarray] = None,
    respect_tunable: bool = True,
) -> GradientStore:
    """Chain rule through a traced pass.

    ``dlogits`` enters at the head output; ``dembeddings`` is added at the penultimate
    activations, for losses that read embeddings directly. Frozen layers get zero blocks
    but still pass gradient to the layers below them.
    """
    last = model.layer_count - 1
    upstream = np.zeros_like(trace.logits) if dlogits is None else np.asarray(dlogits, dtype=np.float64)
    if upstream.shape != trace.logits.shape:
        raise ShapeError(f"Logit gradient shape {upstream.shape} does not match logits {trace.logits.shape}.")
    blocks: List[Optional[LayerBlock]] = [None] * model.layer_count
    for index in range(last, -1, -1):
        layer = model.layers[index]
        delta = upstream if index == last else upstream * _leaky_slope(trace.preactivations[index])
        if respect_tunable and not layer.tunable:
            blocks[index] = LayerBlock(np.zeros_like(layer.weight), np.zeros_like(layer.bias))
        else:
            blocks[index] = LayerBlock(delta.T @ trace.activations[index], delta.sum(axis=0))
        upstream = delta @ layer.weight
        if index == last and dembeddings is not None:
            if dembeddings.shape != upstream.shape:
                raise ShapeError(f"Embedding gradient shape {dembeddings.shape} does not match {upstream.shape}.")
            upstream = upstream + dembeddings
    return GradientStore(blocks)


def loss_and_gradients(
    model: ParameterStore,
    batch: Batch,
    loss_fn: LossFn = softmax_cross_entropy,
    respect_tunable: bool = True,
) -> Tuple[float, GradientStore]:
    trace = trace_forward(model, batch.inputs)
    loss, dlogits = loss_fn(trace.logits, batch.labels)
    return loss, backpropagate(model, trace, dlogits=dlogits, respect_tunable=respect_tunable)


def backward(model: ParameterStore, batch: Batch, loss_fn: LossFn = softmax_cross_entropy) -> GradientStore:
    """Exact gradients of ``loss_fn`` for every tunable parameter; frozen layers get zeros."""
    return loss_and_gradients(model, batch, loss_fn)[1]


def clip_update(update: GradientStore, max_step: float) -> GradientStore:
    """Clamp every entry to ``[-max_step, max_step]``."""
    if not max_step > 0:
        raise ConfigError(f"Clipping threshold must be positive, got {max_step}.")
    return GradientStore(
        [
            LayerBlock(np.clip(block.weight, -max_step, max_step), np.clip(block.bias, -max_step, max_step))
            for block in update
        ]
    )


def apply_update(model: ParameterStore, update: GradientStore) -> None:
    """``W <- W - update`` on tunable layers, in place."""
    for layer, block in zip(model.layers, update):
        if layer.tunable:
            layer.weight -= block.weight
            layer.bias -= block.bias


class SGD:
    """Stochastic gradient descent over tunable layers, with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0) -> None:
        if not lr > 0:
            raise ConfigError(f"Learning rate must be positive, got {lr}.")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"Momentum must lie in [0, 1), got {momentum}.")
        self.lr = lr
        self.momentum = momentum
        self._velocity: Optional[List[LayerBlock]] = None

    def step(self, model: ParameterStore, grads: GradientStore) -> None:
        if not grads.matches(model):
            raise ShapeError("Gradient store does not match the model's shapes.")
        if self.momentum == 0.0:
            apply_update(model, grads.scaled(self.lr))
            return
        if self._velocity is None or [v.shapes for v in self._velocity] != [g.shapes for g in grads]:
            self._velocity = [LayerBlock(np.zeros_like(g.weight), np.zeros_like(g.bias)) for g in grads]
        for velocity, grad in zip(self._velocity, grads):
            velocity.weight *= self.momentum
            velocity.weight += grad.weight
            velocity.bias *= self.momentum
            velocity.bias += grad.bias
        apply_update(model, GradientStore(self._velocity).scaled(self.lr))
