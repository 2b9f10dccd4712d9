"""Per-parameter label relevance from adversarial weight perturbation.

A trained model is pushed uphill on cross-entropy plus KL to the previous task's model.
Squared per-parameter displacement, normalized within each layer, is the new importance,
which saturates into the running projection matrix S.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .nn_engine import (
    Batch,
    GradientStore,
    LayerBlock,
    LossFn,
    ParameterStore,
    forward,
    kl_divergence_with_grad,
    loss_and_gradients,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)


@dataclass
class ImportanceMatrix:
    blocks: List[LayerBlock]
    task_counter: int = 0
    pad_value: float = 0.0

    @classmethod
    def zeros_like(cls, model: ParameterStore) -> "ImportanceMatrix":
        return cls([LayerBlock(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in model.layers])

    @classmethod
    def ones_like(cls, model: ParameterStore) -> "ImportanceMatrix":
        return cls(
            [LayerBlock(np.ones_like(layer.weight), np.ones_like(layer.bias)) for layer in model.layers], pad_value=1.0
        )

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, index: int) -> LayerBlock:
        return self.blocks[index]

    def matches(self, model: ParameterStore) -> bool:
        return len(self.blocks) == model.layer_count and all(
            block.shapes == (layer.weight.shape, layer.bias.shape) for block, layer in zip(self.blocks, model.layers)
        )

    def in_range(self) -> bool:
        return all(((block.flat() >= 0.0) & (block.flat() <= 1.0)).all() for block in self.blocks)

    def expand_to(self, model: ParameterStore) -> "ImportanceMatrix":
        """Pad the head block with ``pad_value`` rows for classes the model gained since."""
        if len(self.blocks) != model.layer_count:
            raise ShapeError(f"Importance covers {len(self.blocks)} layers; the model has {model.layer_count}.")
        for index, (block, layer) in enumerate(zip(self.blocks[:-1], model.layers[:-1])):
            if block.shapes != (layer.weight.shape, layer.bias.shape):
                raise ShapeError(f"Importance block {index} does not match layer {index}.")
        head, target = self.blocks[-1], model.head
        extra = target.out_dim - head.weight.shape[0]
        if extra < 0 or head.weight.shape[1] != target.in_dim:
            raise ShapeError("The model head is smaller than the importance head block.")
        padded = LayerBlock(
            np.vstack([head.weight, np.full((extra, target.in_dim), self.pad_value)]),
            np.concatenate([head.bias, np.full(extra, self.pad_value)]),
        )
        return ImportanceMatrix(
            [block.copy() for block in self.blocks[:-1]] + [padded], self.task_counter, self.pad_value
        )

    def layer_means(self) -> List[float]:
        return [float(block.flat().mean()) for block in self.blocks]


def _adversarial_objective(prev_logits: np.ndarray) -> LossFn:
    shared = prev_logits.shape[1]

    def objective(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        loss, dlogits = softmax_cross_entropy(logits, labels)
        divergence, ddivergence = kl_divergence_with_grad(logits[:, :shared], prev_logits)
        dlogits[:, :shared] += ddivergence
        return loss + divergence, dlogits

    return objective


def adversarial_loss(
    model: ParameterStore, prev_model: ParameterStore, batch: Batch
) -> Tuple[float, GradientStore]:
    """Cross-entropy on ``batch`` plus KL(P_model || P_prev) over the class columns both heads share.

    Gradients cover every layer regardless of its tunable flag.
    """
    if prev_model.output_dim > model.output_dim:
        raise ConfigError(
            f"The previous head has {prev_model.output_dim} classes, more than the current {model.output_dim}."
        )
    _, prev_logits = forward(prev_model, batch.inputs)
    return loss_and_gradients(model, batch, _adversarial_objective(prev_logits), respect_tunable=False)


def perturb_adversarially(
    model: ParameterStore,
    prev_model: ParameterStore,
    dataset: Batch,
    lr_adv: float,
    epochs: int = 1,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> ParameterStore:
    """Gradient ascent on the adversarial loss, applied to a copy of ``model``."""
    if epochs < 1:
        raise ConfigError("Adversarial perturbation needs at least one epoch.")
    if lr_adv < 0:
        raise ConfigError(f"Ascent step size must be non-negative, got {lr_adv}.")
    perturbed = model.clone()
    if lr_adv == 0:
        return perturbed
    size = batch_size or len(dataset)
    for _ in range(epochs):
        order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
        for start in range(0, len(dataset), size):
            rows = order[start : start + size]
            _, grads = adversarial_loss(perturbed, prev_model, Batch(dataset.inputs[rows], dataset.labels[rows]))
            for layer, grad in zip(perturbed.layers, grads):
                layer.weight += lr_adv * grad.weight
                layer.bias += lr_adv * grad.bias
    return perturbed


def layer_importance(model: ParameterStore, perturbed: ParameterStore) -> List[LayerBlock]:
    """Squared displacement per parameter, divided by its layer's maximum (all-zero if nothing moved)."""
    if model.layer_count != perturbed.layer_count:
        raise ShapeError("Perturbed model has a different number of layers.")
    result = []
    for index, (original, moved) in enumerate(zip(model.layers, perturbed.layers)):
        if original.weight.shape != moved.weight.shape:
            raise ShapeError(f"Layer {index} changed shape under perturbation.")
        weight = (moved.weight - original.weight) ** 2
        bias = (moved.bias - original.bias) ** 2
        peak = max(float(weight.max(initial=0.0)), float(bias.max(initial=0.0)))
        if peak == 0.0:
            logger.warning("Layer %d did not move under perturbation; its importance is zero.", index)
            result.append(LayerBlock(np.zeros_like(weight), np.zeros_like(bias)))
        else:
            result.append(LayerBlock(weight / peak, bias / peak))
    return result


def accumulate_importance(
    current: Union[ImportanceMatrix, Sequence[LayerBlock]], previous: ImportanceMatrix
) -> ImportanceMatrix:
    """Element-wise ``min(current + previous, 1)``."""
    blocks = current.blocks if isinstance(current, ImportanceMatrix) else list(current)
    if len(blocks) != len(previous.blocks):
        raise ShapeError("Importance operands cover different numbers of layers.")
    accumulated = []
    for new, old in zip(blocks, previous.blocks):
        if new.shapes != old.shapes:
            raise ShapeError(f"Importance shapes differ: {new.shapes} vs {old.shapes}.")
        for values in (new.flat(), old.flat()):
            if values.size and (values.min() < 0.0 or values.max() > 1.0):
                raise ConfigError("Importance entries must lie in [0, 1].")
        accumulated.append(
            LayerBlock(np.minimum(new.weight + old.weight, 1.0), np.minimum(new.bias + old.bias, 1.0))
        )
    return ImportanceMatrix(accumulated, previous.task_counter + 1)


def estimate_importance(
    model: ParameterStore,
    prev_model: ParameterStore,
    dataset: Batch,
    previous: ImportanceMatrix,
    lr_adv: float,
    epochs: int = 1,
) -> ImportanceMatrix:
    """Perturb, normalize per layer and fold into ``previous`` (padded to the current head)."""
    perturbed = perturb_adversarially(model, prev_model, dataset, lr_adv, epochs)
    current = layer_importance(model, perturbed)
    updated = accumulate_importance(current, previous.expand_to(model))
    logger.info(
        "Importance after task %d: layer means %s.",
        updated.task_counter,
        ", ".join(f"{value:.3f}" for value in updated.layer_means()),
    )
    return updated


def write_importance_csv(importance: ImportanceMatrix, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["layer", "index", "importance"])
        for layer_index, block in enumerate(importance.blocks):
            for flat_index, value in enumerate(block.flat()):
                writer.writerow([layer_index, flat_index, f"{value:.8f}"])
    return path
