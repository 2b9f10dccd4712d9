"""Open-set pre-training by implanting synthesized classes between base-class pairs.

Each episode is augmented with ``n`` extra classes whose samples are convex mixes of
two base classes, prototypes are built from the augmented support set, and the backbone
is trained on the augmented query loss. ``closed_set_pretrain`` is the plain
cross-entropy alternative used by the comparison methods.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data_gen import ClassSet, Episode, sample_episode
from .errors import ConfigError, LabelError, ShapeError
from .nn_engine import (
    SGD,
    Batch,
    GradientStore,
    ParameterStore,
    backpropagate,
    embed,
    softmax_cross_entropy,
    trace_forward,
)

logger = logging.getLogger(__name__)

COSINE_SCALE = 10.0
_NORM_FLOOR = 1e-12


class MixSpace(str, Enum):
    INPUT = "input"
    EMBEDDING = "embedding"


class PrototypeMetric(str, Enum):
    DOT = "dot"
    COSINE = "cosine"


@dataclass(frozen=True)
class MixSpec:
    """Beta(beta_a, beta_b) distribution of the mixing ratio."""

    beta_a: float = 1.5
    beta_b: float = 1.5

    def __post_init__(self) -> None:
        if not (self.beta_a > 0 and self.beta_b > 0):
            raise ConfigError(f"Beta shape parameters must be positive; got ({self.beta_a}, {self.beta_b}).")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.beta(self.beta_a, self.beta_b, size=size)


@dataclass(frozen=True)
class MixRecipe:
    """Row ``i`` of the output is ``lambdas[i] * pool[first[i]] + (1 - lambdas[i]) * pool[second[i]]``."""

    first: np.ndarray
    second: np.ndarray
    lambdas: np.ndarray

    def apply(self, pool: np.ndarray) -> np.ndarray:
        weights = self.lambdas[:, None]
        return weights * pool[self.first] + (1.0 - weights) * pool[self.second]

    def route(self, grad: np.ndarray, pool_rows: int) -> np.ndarray:
        """Gradient of ``apply`` pulled back onto the pool rows."""
        routed = np.zeros((pool_rows, grad.shape[1]))
        np.add.at(routed, self.first, self.lambdas[:, None] * grad)
        np.add.at(routed, self.second, (1.0 - self.lambdas)[:, None] * grad)
        return routed


@dataclass(frozen=True)
class AugmentedEpisode:
    episode: Episode
    mix_space: MixSpace
    pairs: np.ndarray
    support_recipe: MixRecipe
    query_recipe: MixRecipe
    synthesized_support: np.ndarray
    synthesized_query: np.ndarray

    @property
    def way(self) -> int:
        return 2 * self.episode.way

    @property
    def pool_inputs(self) -> np.ndarray:
        """Base support rows followed by base query rows; recipes index into this."""
        return np.vstack([self.episode.support_inputs, self.episode.query_inputs])

    @property
    def support_labels(self) -> np.ndarray:
        n, k = self.episode.way, self.episode.shot
        return np.concatenate([self.episode.support_labels, n + np.repeat(np.arange(n), k)])

    @property
    def query_labels(self) -> np.ndarray:
        n, q = self.episode.way, self.episode.query_per_class
        return np.concatenate([self.episode.query_labels, n + np.repeat(np.arange(n), q)])


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    loss: float
    query_acc: float

    CSV_HEADER = ("episode", "loss", "query_acc")

    def as_row(self) -> tuple:
        return self.episode, self.loss, self.query_acc


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    acc: float

    CSV_HEADER = ("epoch", "loss", "acc")

    def as_row(self) -> tuple:
        return self.epoch, self.loss, self.acc


def mix_features(x1: np.ndarray, x2: np.ndarray, lam: float) -> np.ndarray:
    """``lam * x1 + (1 - lam) * x2``."""
    first = np.asarray(x1, dtype=np.float64)
    second = np.asarray(x2, dtype=np.float64)
    if first.shape != second.shape:
        raise ShapeError(f"Cannot mix vectors of shapes {first.shape} and {second.shape}.")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"Mixing ratio must lie in [0, 1], got {lam}.")
    return lam * first + (1.0 - lam) * second


def _choose_pairs(n: int, rng: np.random.Generator) -> np.ndarray:
    candidates = np.array(list(itertools.combinations(range(n), 2)))
    picked = rng.choice(len(candidates), size=n, replace=len(candidates) < n)
    return candidates[picked]


def _recipe(
    pairs: np.ndarray, labels: np.ndarray, per_class: int, offset: int, spec: MixSpec, rng: np.random.Generator
) -> MixRecipe:
    rows_of = [np.flatnonzero(labels == label) + offset for label in range(len(pairs))]
    first = np.concatenate([rng.choice(rows_of[a], size=per_class) for a, _ in pairs])
    second = np.concatenate([rng.choice(rows_of[b], size=per_class) for _, b in pairs])
    return MixRecipe(first, second, spec.sample(rng, first.shape[0]))


def synthesize_episode(
    ep: Episode,
    spec: MixSpec,
    mix_space: MixSpace,
    model: Optional[ParameterStore],
    rng: np.random.Generator,
) -> AugmentedEpisode:
    """Add ``ep.way`` synthesized classes, each mixing one unordered pair of episode classes."""
    if ep.way < 2:
        raise ConfigError("Synthesizing classes needs an episode of at least two classes.")
    mix_space = MixSpace(mix_space)
    pairs = _choose_pairs(ep.way, rng)
    support_recipe = _recipe(pairs, ep.support_labels, ep.shot, 0, spec, rng)
    query_recipe = _recipe(pairs, ep.query_labels, ep.query_per_class, ep.support_inputs.shape[0], spec, rng)
    pool = np.vstack([ep.support_inputs, ep.query_inputs])
    if mix_space is MixSpace.EMBEDDING:
        if model is None:
            raise ConfigError("Embedding-space mixing needs a model.")
        pool = embed(model, pool)
    return AugmentedEpisode(
        episode=ep,
        mix_space=mix_space,
        pairs=pairs,
        support_recipe=support_recipe,
        query_recipe=query_recipe,
        synthesized_support=support_recipe.apply(pool),
        synthesized_query=query_recipe.apply(pool),
    )


def build_prototype_classifier(
    embeddings: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None
) -> np.ndarray:
    """Row ``c`` is the mean embedding of class ``c``."""
    embeddings = np.array(embeddings, dtype=np.float64, ndmin=2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != embeddings.shape[0]:
        raise ShapeError(f"{embeddings.shape[0]} embeddings but {labels.shape[0]} labels.")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"Labels must lie in [0, {n_classes}).")
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        raise ConfigError(f"Classes {np.flatnonzero(counts == 0).tolist()} have no embeddings.")
    sums = np.zeros((n_classes, embeddings.shape[1]))
    np.add.at(sums, labels, embeddings)
    return sums / counts[:, None]


def _normalize_backward(unit: np.ndarray, norm: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    return (grad_unit - unit * (grad_unit * unit).sum(axis=1, keepdims=True)) / norm


def prototype_logits(
    query: np.ndarray, prototypes: np.ndarray, metric: PrototypeMetric = PrototypeMetric.DOT
) -> Tuple[np.ndarray, Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]]:
    """Logits of query embeddings against prototypes, plus the pullback to both operands."""
    if PrototypeMetric(metric) is PrototypeMetric.DOT:

        def pullback(dlogits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return dlogits @ prototypes, dlogits.T @ query

        return query @ prototypes.T, pullback

    query_norm = np.maximum(np.linalg.norm(query, axis=1, keepdims=True), _NORM_FLOOR)
    proto_norm = np.maximum(np.linalg.norm(prototypes, axis=1, keepdims=True), _NORM_FLOOR)
    query_unit = query / query_norm
    proto_unit = prototypes / proto_norm

    def pullback(dlogits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_query_unit = COSINE_SCALE * dlogits @ proto_unit
        grad_proto_unit = COSINE_SCALE * dlogits.T @ query_unit
        return (
            _normalize_backward(query_unit, query_norm, grad_query_unit),
            _normalize_backward(proto_unit, proto_norm, grad_proto_unit),
        )

    return COSINE_SCALE * query_unit @ proto_unit.T, pullback


def episode_loss_and_gradients(
    model: ParameterStore, aug: AugmentedEpisode, metric: PrototypeMetric = PrototypeMetric.DOT
) -> Tuple[float, float, GradientStore]:
    """Query cross-entropy against prototypes of the augmented support set.

    Returns ``(loss, query accuracy, gradients)``. The head receives no gradient; the
    loss reaches the backbone through the query embeddings and the prototypes.
    """
    ep = aug.episode
    support_rows, query_rows = ep.support_inputs.shape[0], ep.query_inputs.shape[0]
    pool = aug.pool_inputs
    if aug.mix_space is MixSpace.INPUT:
        trace = trace_forward(model, np.vstack([pool, aug.synthesized_support, aug.synthesized_query]))
        embeddings = trace.embeddings
        split = support_rows + query_rows
        synthesized_support = embeddings[split : split + support_rows]
        synthesized_query = embeddings[split + support_rows :]
    else:
        trace = trace_forward(model, pool)
        embeddings = trace.embeddings
        synthesized_support = aug.support_recipe.apply(embeddings)
        synthesized_query = aug.query_recipe.apply(embeddings)
    support = np.vstack([embeddings[:support_rows], synthesized_support])
    query = np.vstack([embeddings[support_rows : support_rows + query_rows], synthesized_query])

    support_labels, query_labels = aug.support_labels, aug.query_labels
    prototypes = build_prototype_classifier(support, support_labels, aug.way)
    logits, pullback = prototype_logits(query, prototypes, metric)
    loss, dlogits = softmax_cross_entropy(logits, query_labels)
    accuracy = float((logits.argmax(axis=1) == query_labels).mean())

    grad_query, grad_prototypes = pullback(dlogits)
    counts = np.bincount(support_labels, minlength=aug.way)
    grad_support = grad_prototypes[support_labels] / counts[support_labels][:, None]

    if aug.mix_space is MixSpace.INPUT:
        grad_embeddings = np.vstack(
            [grad_support[:support_rows], grad_query[:query_rows], grad_support[support_rows:], grad_query[query_rows:]]
        )
    else:
        grad_embeddings = np.zeros_like(embeddings)
        grad_embeddings[:support_rows] += grad_support[:support_rows]
        grad_embeddings[support_rows:] += grad_query[:query_rows]
        grad_embeddings += aug.support_recipe.route(grad_support[support_rows:], embeddings.shape[0])
        grad_embeddings += aug.query_recipe.route(grad_query[query_rows:], embeddings.shape[0])
    return loss, accuracy, backpropagate(model, trace, dembeddings=grad_embeddings)


def implant_pretrain(
    model: ParameterStore,
    base: ClassSet,
    episodes: int,
    n: int,
    k: int,
    q: int,
    spec: MixSpec,
    lr: float,
    seed: int,
    mix_space: MixSpace = MixSpace.EMBEDDING,
    metric: PrototypeMetric = PrototypeMetric.DOT,
    momentum: float = 0.0,
    mix_seed: Optional[int] = None,
) -> Tuple[ParameterStore, List[EpisodeRecord]]:
    """Episodic backbone training on augmented episodes. Returns a trained copy and its log."""
    if len(base) < n:
        raise ConfigError(f"Implanting needs {n} base classes; only {len(base)} are available.")
    trained = model.clone()
    trained.set_all_tunable(True)
    log: List[EpisodeRecord] = []
    if episodes <= 0:
        return trained, log
    episode_rng = np.random.default_rng(seed)
    mix_rng = episode_rng if mix_seed is None else np.random.default_rng(mix_seed)
    optimizer = SGD(lr, momentum)
    for index in range(episodes):
        ep = sample_episode(base, n, k, q, episode_rng)
        aug = synthesize_episode(ep, spec, mix_space, trained, mix_rng)
        loss, accuracy, grads = episode_loss_and_gradients(trained, aug, metric)
        optimizer.step(trained, grads)
        log.append(EpisodeRecord(index, loss, accuracy))
        logger.debug("Implant episode %d: loss=%.4f query_acc=%.3f", index, loss, accuracy)
    window = log[-min(100, len(log)) :]
    logger.info(
        "Implanting finished after %d episodes; recent query accuracy %.3f.",
        episodes,
        float(np.mean([record.query_acc for record in window])),
    )
    return trained, log


def _train_epochs(
    model: ParameterStore,
    batch: Batch,
    epochs: int,
    batch_size: int,
    optimizer: SGD,
    rng: np.random.Generator,
) -> List[EpochRecord]:
    log: List[EpochRecord] = []
    for epoch in range(epochs):
        order = rng.permutation(len(batch))
        losses, correct = [], 0
        for start in range(0, len(batch), batch_size):
            rows = order[start : start + batch_size]
            minibatch = Batch(batch.inputs[rows], batch.labels[rows])
            trace = trace_forward(model, minibatch.inputs)
            loss, dlogits = softmax_cross_entropy(trace.logits, minibatch.labels)
            correct += int((trace.logits.argmax(axis=1) == minibatch.labels).sum())
            losses.append(loss * len(rows))
            optimizer.step(model, backpropagate(model, trace, dlogits=dlogits))
        log.append(EpochRecord(epoch, float(np.sum(losses) / len(batch)), correct / len(batch)))
    return log


def closed_set_pretrain(
    model: ParameterStore,
    base: ClassSet,
    class_ids: Sequence[int],
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float,
    rng: np.random.Generator,
) -> Tuple[ParameterStore, List[EpochRecord]]:
    """Cross-entropy training of backbone and head over all base classes."""
    if model.output_dim != len(class_ids):
        raise ShapeError(f"Head has {model.output_dim} rows for {len(class_ids)} base classes.")
    trained = model.clone()
    trained.set_all_tunable(True)
    batch = base.train_batch(class_ids, {class_id: row for row, class_id in enumerate(class_ids)})
    log = _train_epochs(trained, batch, epochs, batch_size, SGD(lr, momentum), rng)
    if log:
        logger.info("Closed-set pre-training: final loss %.4f, train accuracy %.3f.", log[-1].loss, log[-1].acc)
    return trained, log


def fit_base_head(
    model: ParameterStore,
    base: ClassSet,
    class_ids: Sequence[int],
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.0,
) -> Tuple[ParameterStore, List[EpochRecord]]:
    """Global head over all base classes: prototype rows, then head-only cross-entropy epochs."""
    batch = base.train_batch(class_ids, {class_id: row for row, class_id in enumerate(class_ids)})
    prototypes = build_prototype_classifier(embed(model, batch.inputs), batch.labels, len(class_ids))
    fitted = model.with_head(prototypes, np.zeros(len(class_ids)))
    fitted.set_tunable_top(0)
    log = _train_epochs(fitted, batch, epochs, batch_size, SGD(lr, momentum), rng) if epochs > 0 else []
    fitted.set_all_tunable(True)
    return fitted, log
