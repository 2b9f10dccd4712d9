"""Dense Model Fusion: importance-projected fusion of every SGD step toward the task-start weights.

After each clipped SGD step the weights are pulled back toward ``W_init`` by ``S * alpha``
per parameter, which caps each parameter's drift at ``max_step * (1 - s*alpha) / (s*alpha)``
no matter how many iterations run.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .implanting import build_prototype_classifier
from .importance import ImportanceMatrix
from .nn_engine import (
    Batch,
    GradientStore,
    Layer,
    LayerBlock,
    ParameterStore,
    apply_update,
    backpropagate,
    clip_update,
    embed,
    softmax_cross_entropy,
    trace_forward,
)

logger = logging.getLogger(__name__)

RATIO_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DmfConfig:
    lr: float = 0.001
    max_step: float = 0.01
    damping: float = 0.3
    error_coef: float = 0.4
    alpha_min: float = 0.01
    alpha_max: float = 1.0
    tunable_top_layers: int = 2
    iterations: int = 200
    adaptive_alpha: bool = True

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"DMF learning rate must be positive, got {self.lr}.")
        if not self.max_step > 0:
            raise ConfigError(f"max_step must be positive, got {self.max_step}.")
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ConfigError(f"Need 0 <= alpha_min <= alpha_max <= 1; got [{self.alpha_min}, {self.alpha_max}].")
        if self.tunable_top_layers < 0 or self.iterations < 0:
            raise ConfigError("tunable_top_layers and iterations must be non-negative.")

    @property
    def alpha_clamp(self) -> Tuple[float, float]:
        return self.alpha_min, self.alpha_max

    def alpha_for(self, error: float) -> float:
        if self.adaptive_alpha:
            return egpsa_alpha(self.damping, self.error_coef, error, self.alpha_clamp)
        return float(min(max(self.damping, self.alpha_min), self.alpha_max))


@dataclass(frozen=True)
class DmfRecord:
    iteration: int
    e: float
    alpha: float
    loss: float
    max_displacement_ratio: float

    CSV_HEADER = ("iter", "e", "alpha", "loss", "max_displacement_ratio")

    def as_row(self) -> tuple:
        return self.iteration, self.e, self.alpha, self.loss, self.max_displacement_ratio


@dataclass
class DisplacementReport:
    displacement: List[LayerBlock]
    bound: List[LayerBlock]
    max_ratio: float
    alpha: float
    bounded_count: int
    max_task_drift: float = 0.0

    def within_bound(self, tolerance: float = RATIO_TOLERANCE) -> bool:
        return self.max_ratio <= 1.0 + tolerance


ProjectionLike = Union[ImportanceMatrix, Sequence[LayerBlock]]


def expand_classifier(
    model: ParameterStore, new_class_embedding_means: np.ndarray
) -> Tuple[ParameterStore, ParameterStore]:
    """Append one head row per new class, set to its mean embedding; also return the ``W_init`` snapshot."""
    means = np.array(new_class_embedding_means, dtype=np.float64, ndmin=2)
    if means.shape[1] != model.embedding_dim:
        raise ShapeError(f"Class means have {means.shape[1]} dims; the head expects {model.embedding_dim}.")
    head = model.head
    expanded = model.with_head(
        np.vstack([head.weight, means]),
        np.concatenate([head.bias, np.zeros(means.shape[0])]),
    )
    return expanded, expanded.snapshot()


def egpsa_alpha(r: float, mu: float, e: float, clamp: Tuple[float, float] = (0.01, 1.0)) -> float:
    """Error-guided damping ``r - mu * e``, clamped."""
    if not 0.0 <= e <= 1.0:
        raise ConfigError(f"Batch error rate must lie in [0, 1], got {e}.")
    low, high = clamp
    return float(min(max(r - mu * e, low), high))


def _check_congruent(model: ParameterStore, blocks: Sequence[LayerBlock], name: str) -> None:
    if len(blocks) != model.layer_count or any(
        block.shapes != (layer.weight.shape, layer.bias.shape) for block, layer in zip(blocks, model.layers)
    ):
        raise ShapeError(f"{name} is not shape-congruent with the model.")


def dmf_step(
    W: ParameterStore,
    grad: GradientStore,
    W_init: ParameterStore,
    S: ProjectionLike,
    alpha: float,
    lr: float,
    max_step: float,
) -> ParameterStore:
    """One clipped SGD step followed by fusion toward ``W_init``; updates ``W`` in place and returns it."""
    projection = list(S)
    _check_congruent(W, list(grad), "Gradient store")
    _check_congruent(W, W_init.blocks(), "W_init")
    _check_congruent(W, projection, "Importance matrix")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"Damping ratio must lie in [0, 1], got {alpha}.")
    update = clip_update(grad.scaled(lr), max_step)
    for layer, step, start, importance in zip(W.layers, update, W_init.layers, projection):
        if not layer.tunable:
            continue
        for current, delta, anchor, weight in (
            (layer.weight, step.weight, start.weight, importance.weight),
            (layer.bias, step.bias, start.bias, importance.bias),
        ):
            pull = weight * alpha
            current[...] = (current - delta) * (1.0 - pull) + anchor * pull
    return W


def _bound_array(values: np.ndarray, alpha: float, max_step: float) -> np.ndarray:
    pull = np.asarray(values, dtype=np.float64) * alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pull > 0, max_step * (1.0 - pull) / pull, np.inf)


def displacement_bound(
    S: Union[ProjectionLike, np.ndarray, float], alpha: float, max_step: float
) -> Union[List[LayerBlock], np.ndarray]:
    """Limit of ``|W_n - W_init|`` per parameter; ``inf`` where ``s * alpha == 0``."""
    if isinstance(S, (int, float, np.ndarray)):
        return _bound_array(S, alpha, max_step)
    return [
        LayerBlock(_bound_array(block.weight, alpha, max_step), _bound_array(block.bias, alpha, max_step))
        for block in S
    ]


def _ratios(displacement: np.ndarray, bound: np.ndarray) -> np.ndarray:
    bounded = np.isfinite(bound)
    ratios = np.zeros_like(displacement)
    positive = bounded & (bound > 0)
    ratios[positive] = displacement[positive] / bound[positive]
    pinned = bounded & (bound == 0)
    ratios[pinned] = np.where(displacement[pinned] == 0.0, 0.0, np.inf)
    return ratios[bounded]


def _max_task_drift(model: ParameterStore, previous: ParameterStore) -> float:
    drift = 0.0
    for layer, old in zip(model.layers, previous.layers):
        rows = old.weight.shape[0]
        drift = max(
            drift,
            float(np.abs(layer.weight[:rows] - old.weight).max(initial=0.0)),
            float(np.abs(layer.bias[:rows] - old.bias).max(initial=0.0)),
        )
    return drift


def displacement_report(
    model: ParameterStore,
    W_init: ParameterStore,
    S: ProjectionLike,
    alpha: float,
    max_step: float,
    previous: Optional[ParameterStore] = None,
) -> DisplacementReport:
    displacement = [
        LayerBlock(np.abs(layer.weight - start.weight), np.abs(layer.bias - start.bias))
        for layer, start in zip(model.layers, W_init.layers)
    ]
    bound = displacement_bound(list(S), alpha, max_step)
    ratios = np.concatenate([_ratios(moved.flat(), limit.flat()) for moved, limit in zip(displacement, bound)])
    return DisplacementReport(
        displacement=displacement,
        bound=bound,
        max_ratio=float(ratios.max(initial=0.0)),
        alpha=alpha,
        bounded_count=int(ratios.size),
        max_task_drift=_max_task_drift(model, previous) if previous is not None else 0.0,
    )


def _max_ratio(
    model: ParameterStore, W_init: ParameterStore, S: ImportanceMatrix, alpha: float, max_step: float
) -> float:
    return displacement_report(model, W_init, S, alpha, max_step).max_ratio


def compress_adapt(
    model: ParameterStore,
    session_support: Batch,
    W_prev_task: Optional[ParameterStore],
    S: Optional[ImportanceMatrix],
    config: DmfConfig,
) -> Tuple[ParameterStore, DisplacementReport, List[DmfRecord]]:
    """Expand the head for the session's classes, then run DMF iterations on the support set.

    Support labels must address the new head rows ``old .. old + m - 1``. Only the head and
    the top ``config.tunable_top_layers`` backbone layers move.
    """
    old_rows = model.output_dim
    labels = session_support.labels
    new_labels = np.unique(labels)
    if new_labels[0] != old_rows or new_labels[-1] != old_rows + len(new_labels) - 1:
        raise ConfigError(f"Support labels must cover head rows {old_rows}..{old_rows + len(new_labels) - 1}.")
    means = build_prototype_classifier(embed(model, session_support.inputs), labels - old_rows, len(new_labels))
    adapted, w_init = expand_classifier(model, means)
    adapted.set_tunable_top(config.tunable_top_layers)
    projection = (S if S is not None else ImportanceMatrix.zeros_like(model)).expand_to(adapted)

    log: List[DmfRecord] = []
    alpha_floor = config.alpha_for(0.0)
    for iteration in range(config.iterations):
        trace = trace_forward(adapted, session_support.inputs)
        error = float((trace.logits.argmax(axis=1) != labels).mean())
        alpha = config.alpha_for(error)
        loss, dlogits = softmax_cross_entropy(trace.logits, labels)
        grads = backpropagate(adapted, trace, dlogits=dlogits)
        if not (np.isfinite(loss) and grads.is_finite()):
            raise DivergenceError(f"Loss or gradients stopped being finite at DMF iteration {iteration}.")
        dmf_step(adapted, grads, w_init, projection, alpha, config.lr, config.max_step)
        alpha_floor = min(alpha_floor, alpha)
        ratio = _max_ratio(adapted, w_init, projection, alpha_floor, config.max_step)
        log.append(DmfRecord(iteration, error, alpha, loss, ratio))
        logger.debug("DMF iteration %d: e=%.3f alpha=%.3f loss=%.4f ratio=%.4f", iteration, error, alpha, loss, ratio)

    if not adapted.is_finite():
        raise DivergenceError("Adapted weights are not finite.")
    report = displacement_report(adapted, w_init, projection, alpha_floor, config.max_step, previous=W_prev_task)
    if not report.within_bound():
        logger.warning("Displacement ratio %.6f exceeds the analytic bound.", report.max_ratio)
    adapted.set_all_tunable(True)
    return adapted, report, log


def simulate_worst_case(s_alpha: float, max_step: float, iterations: int) -> float:
    """Drift of one parameter fed a constant, saturating, same-sign gradient."""
    store = ParameterStore([Layer(np.zeros((1, 1)), np.zeros(1))])
    w_init = store.snapshot()
    projection = [LayerBlock(np.full((1, 1), s_alpha), np.full(1, s_alpha))]
    grad = GradientStore([LayerBlock(np.full((1, 1), 10.0 * max_step), np.full(1, 10.0 * max_step))])
    for _ in range(iterations):
        dmf_step(store, grad, w_init, projection, 1.0, 1.0, max_step)
    return float(abs(store.layers[0].weight[0, 0]))


def simulate_random_streams(
    count: int, width: int, iterations: int, rng: np.random.Generator, max_step: float = 0.01
) -> float:
    """Largest drift/bound ratio over ``count`` independent random gradient streams of ``width`` parameters.

    Every stream gets its own ``s * alpha`` per parameter; gradients are Gaussian with a
    per-stream scale, so some streams saturate the clip and some never reach it.
    """
    store = ParameterStore([Layer(np.zeros((count, width)), np.zeros(count))])
    w_init = store.snapshot()
    pulls = [LayerBlock(rng.uniform(0.01, 1.0, size=(count, width)), rng.uniform(0.01, 1.0, size=count))]
    scales = rng.uniform(0.1, 10.0, size=count) * max_step
    drifts = rng.choice([-1.0, 1.0], size=count) * scales
    for _ in range(iterations):
        grad = GradientStore(
            [
                LayerBlock(
                    rng.normal(size=(count, width)) * scales[:, None] + drifts[:, None],
                    rng.normal(size=count) * scales,
                )
            ]
        )
        dmf_step(store, grad, w_init, pulls, 1.0, 1.0, max_step)
    return displacement_report(store, w_init, pulls, 1.0, max_step).max_ratio


def unrolled_trajectory(w_init: np.ndarray, updates: Iterable[np.ndarray], s_alpha: np.ndarray) -> np.ndarray:
    """Closed form ``W_init - sum_i (1 - s*alpha)^i * u_{n-i+1}`` for already-clipped updates."""
    updates = [np.asarray(update, dtype=np.float64) for update in updates]
    keep = 1.0 - np.asarray(s_alpha, dtype=np.float64)
    total = np.zeros_like(np.asarray(w_init, dtype=np.float64))
    n = len(updates)
    for i in range(1, n + 1):
        total = total + keep**i * updates[n - i]
    return np.asarray(w_init, dtype=np.float64) - total


def _random_store(rows: int, cols: int, rng: np.random.Generator) -> ParameterStore:
    return ParameterStore([Layer(rng.normal(size=(rows, cols)), rng.normal(size=rows))])


def _random_grad(rows: int, cols: int, scale: float, rng: np.random.Generator) -> GradientStore:
    return GradientStore([LayerBlock(rng.normal(size=(rows, cols)) * scale, rng.normal(size=rows) * scale)])


def zero_alpha_gap(
    steps: int, rows: int, cols: int, rng: np.random.Generator, lr: float = 1.0, max_step: float = 0.01
) -> float:
    """Largest gap between DMF at ``alpha = 0`` and plain clipped SGD fed the same gradients."""
    fused = _random_store(rows, cols, rng)
    w_init = fused.snapshot()
    plain = fused.clone()
    projection = [LayerBlock(rng.uniform(size=(rows, cols)), rng.uniform(size=rows))]
    gap = 0.0
    for _ in range(steps):
        grad = _random_grad(rows, cols, 3.0 * max_step, rng)
        dmf_step(fused, grad, w_init, projection, 0.0, lr, max_step)
        apply_update(plain, clip_update(grad.scaled(lr), max_step))
        gap = max(gap, max(float(np.abs(a.flat() - b.flat()).max()) for a, b in zip(fused.blocks(), plain.blocks())))
    return gap


def pinned_drift(steps: int, rows: int, cols: int, rng: np.random.Generator, max_step: float = 0.01) -> float:
    """Largest drift, checked after every step, of parameters whose ``s * alpha`` is 1."""
    store = _random_store(rows, cols, rng)
    w_init = store.snapshot()
    pinned = [LayerBlock(rng.uniform(size=(rows, cols)) < 0.5, rng.uniform(size=rows) < 0.5)]
    projection = [LayerBlock(np.where(pinned[0].weight, 1.0, 0.3), np.where(pinned[0].bias, 1.0, 0.3))]
    drift = 0.0
    for _ in range(steps):
        dmf_step(store, _random_grad(rows, cols, 3.0 * max_step, rng), w_init, projection, 1.0, 1.0, max_step)
        layer, start = store.layers[0], w_init.layers[0]
        drift = max(
            drift,
            float(np.abs(layer.weight - start.weight)[pinned[0].weight].max(initial=0.0)),
            float(np.abs(layer.bias - start.bias)[pinned[0].bias].max(initial=0.0)),
        )
    return drift


def recursion_gap(steps: int, rows: int, cols: int, rng: np.random.Generator, max_step: float = 0.01) -> float:
    """Largest gap between iterated ``dmf_step`` and the unrolled sum over the same clipped updates."""
    store = _random_store(rows, cols, rng)
    w_init = store.snapshot()
    projection = [LayerBlock(rng.uniform(0.05, 1.0, size=(rows, cols)), rng.uniform(0.05, 1.0, size=rows))]
    alpha = 0.3
    updates: List[LayerBlock] = []
    for _ in range(steps):
        grad = _random_grad(rows, cols, 3.0 * max_step, rng)
        updates.append(clip_update(grad, max_step)[0])
        dmf_step(store, grad, w_init, projection, alpha, 1.0, max_step)
    start, layer, pull = w_init.layers[0], store.layers[0], projection[0]
    weight = unrolled_trajectory(start.weight, [u.weight for u in updates], pull.weight * alpha)
    bias = unrolled_trajectory(start.bias, [u.bias for u in updates], pull.bias * alpha)
    return max(float(np.abs(weight - layer.weight).max()), float(np.abs(bias - layer.bias).max()))
