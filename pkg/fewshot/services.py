"""Business logic for running the incremental few-shot protocol and its comparison methods."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.decomposition import PCA

from .data_gen import (
    ClassSet,
    SessionSchedule,
    build_schedule,
    load_dataset_csv,
    make_blob_classes,
    sample_support,
)
from .dmf import DisplacementReport, DmfConfig, DmfRecord, compress_adapt
from .errors import ConfigError, DivergenceError, OutputError, PipelineStageError
from .implanting import (
    EpisodeRecord,
    EpochRecord,
    MixSpace,
    MixSpec,
    PrototypeMetric,
    closed_set_pretrain,
    fit_base_head,
    implant_pretrain,
)
from .importance import ImportanceMatrix, estimate_importance, write_importance_csv
from .nn_engine import ParameterStore, embed, forward

logger = logging.getLogger(__name__)

SEED_STREAMS = ("data", "schedule", "init", "episodes", "mixup", "shots")


class Method(str, Enum):
    IMCO = "imco"
    IMCO_NO_IMPLANT = "imco_no_implant"
    FROZEN_PROTOTYPE = "frozen_prototype"
    NAIVE_FINETUNE = "naive_finetune"
    IMPLANT_FROZEN = "implant_frozen"
    VANILLA_FUSION = "vanilla_fusion"
    CONSTANT_ALPHA = "constant_alpha"


CORE_METHODS = (Method.NAIVE_FINETUNE, Method.FROZEN_PROTOTYPE, Method.IMCO_NO_IMPLANT, Method.IMCO)
COMPONENT_METHODS = (
    Method.FROZEN_PROTOTYPE,
    Method.IMPLANT_FROZEN,
    Method.VANILLA_FUSION,
    Method.CONSTANT_ALPHA,
    Method.IMCO,
)
BASELINE_KINDS = (Method.FROZEN_PROTOTYPE, Method.NAIVE_FINETUNE, Method.IMCO_NO_IMPLANT)


@dataclass(frozen=True)
class MethodPlan:
    implant: bool
    adaptation: str  # "none", "dmf" or "finetune"
    importance: str = "none"  # "none", "learned" or "uniform"
    adaptive_alpha: bool = True


PLANS: Dict[Method, MethodPlan] = {
    Method.IMCO: MethodPlan(implant=True, adaptation="dmf", importance="learned"),
    Method.IMCO_NO_IMPLANT: MethodPlan(implant=False, adaptation="dmf", importance="learned"),
    Method.FROZEN_PROTOTYPE: MethodPlan(implant=False, adaptation="none"),
    Method.NAIVE_FINETUNE: MethodPlan(implant=False, adaptation="finetune"),
    Method.IMPLANT_FROZEN: MethodPlan(implant=True, adaptation="none"),
    Method.VANILLA_FUSION: MethodPlan(implant=True, adaptation="dmf", importance="uniform", adaptive_alpha=False),
    Method.CONSTANT_ALPHA: MethodPlan(implant=True, adaptation="dmf", importance="learned", adaptive_alpha=False),
}


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "blobs"
    csv_path: str = ""
    num_classes: int = 14
    dim: int = 16
    samples_per_class: int = 200
    center_scale: float = 5.0
    spread: float = 1.0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ImplantSpec:
    episodes: int = 300
    way: int = 5
    query: int = 15
    mix: MixSpec = field(default_factory=MixSpec)
    mix_space: MixSpace = MixSpace.EMBEDDING
    metric: PrototypeMetric = PrototypeMetric.DOT
    lr: float = 0.005
    momentum: float = 0.9
    head_epochs: int = 20
    closed_set_epochs: int = 30
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    base_count: int = 6
    session_size: int = 2
    shots: int = 5
    hidden_dims: Tuple[int, ...] = (64, 32, 32)
    implant: ImplantSpec = field(default_factory=ImplantSpec)
    dmf: DmfConfig = field(default_factory=DmfConfig)
    adv_lr: float = 0.0
    adv_epochs: int = 1
    finetune_lr: float = 0.05
    method: Method = Method.IMCO
    seed: int = 0
    out_dir: str = "runs"

    @property
    def run_name(self) -> str:
        return f"{self.method.value}-seed{self.seed}"

    @property
    def ascent_lr(self) -> float:
        return self.adv_lr or self.dmf.lr


@dataclass(frozen=True)
class SessionMetrics:
    session: int
    acc_all: float
    acc_base: float
    acc_novel: float
    per_class: Dict[int, float]
    class_counts: Dict[int, int]
    forgetting: float
    max_disp_ratio: float

    CSV_HEADER = ("session", "acc_all", "acc_base", "acc_novel", "forgetting", "max_disp_ratio")

    def as_row(self) -> tuple:
        return self.session, self.acc_all, self.acc_base, self.acc_novel, self.forgetting, self.max_disp_ratio


@dataclass
class RunResult:
    config: RunConfig
    schedule: SessionSchedule
    metrics: List[SessionMetrics]
    model: ParameterStore
    pretrained: ParameterStore
    head_classes: List[int]
    pretrain_log: List[object]
    head_log: List[EpochRecord]
    session_logs: Dict[int, List[DmfRecord]]
    reports: Dict[int, DisplacementReport]
    importance: Optional[ImportanceMatrix]
    separation: float
    scatter: List[Tuple[int, float, float]]
    access_counts: Counter


@dataclass(frozen=True)
class AblationRow:
    method: Method
    seeds: int
    final_acc_all: float
    final_acc_base: float
    final_acc_novel: float
    final_forgetting: float
    session_acc_all: Tuple[float, ...]


def stream_seeds(master_seed: int) -> Dict[str, int]:
    """Independent per-purpose seeds derived from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, children)}


def load_classset(spec: DatasetSpec, seed: int) -> ClassSet:
    if spec.source == "csv":
        return load_dataset_csv(spec.csv_path, test_fraction=spec.test_fraction, seed=seed)
    if spec.source == "blobs":
        return make_blob_classes(
            spec.num_classes, spec.dim, spec.samples_per_class, spec.center_scale, spec.spread, seed, spec.test_fraction
        )
    raise ConfigError(f"Unknown dataset source {spec.source!r}.")


def _weighted(per_class: Dict[int, float], counts: Dict[int, int], class_ids: Iterable[int]) -> float:
    ids = list(class_ids)
    total = sum(counts[class_id] for class_id in ids)
    if not total:
        return math.nan
    return sum(per_class[class_id] * counts[class_id] for class_id in ids) / total


def evaluate(
    model: ParameterStore,
    classset: ClassSet,
    seen_class_ids: Sequence[int],
    head_classes: Optional[Sequence[int]] = None,
    base_class_ids: Optional[Sequence[int]] = None,
    session: int = 0,
    history: Sequence[SessionMetrics] = (),
    max_disp_ratio: float = 0.0,
) -> SessionMetrics:
    """Test-split accuracy with argmax restricted to the logits of seen classes.

    ``head_classes[i]`` names the class of head row ``i`` (defaults to ``seen_class_ids``);
    classes outside ``base_class_ids`` count as novel.
    """
    seen = [int(class_id) for class_id in seen_class_ids]
    head_classes = list(seen if head_classes is None else head_classes)
    base = set(seen if base_class_ids is None else base_class_ids)
    row_of = {int(class_id): row for row, class_id in enumerate(head_classes)}
    missing = [class_id for class_id in seen if row_of.get(class_id, model.output_dim) >= model.output_dim]
    if missing:
        raise ConfigError(f"No head row for seen classes {missing}.")
    rows = [row_of[class_id] for class_id in seen]
    labels = np.asarray(seen)
    per_class: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for class_id in seen:
        samples = classset.test(class_id)
        if samples.shape[0] == 0:
            raise ConfigError(f"Class {class_id} has no test samples.")
        _, logits = forward(model, samples)
        if not np.isfinite(logits).all():
            raise DivergenceError(f"Logits for class {class_id} are not finite.")
        predicted = labels[logits[:, rows].argmax(axis=1)]
        per_class[class_id] = float((predicted == class_id).mean())
        counts[class_id] = int(samples.shape[0])
    acc_base = _weighted(per_class, counts, [c for c in seen if c in base])
    novel = [c for c in seen if c not in base]
    previous_best = max((entry.acc_base for entry in history), default=None)
    forgetting = 0.0 if previous_best is None else max(0.0, previous_best - acc_base)
    return SessionMetrics(
        session=session,
        acc_all=_weighted(per_class, counts, seen),
        acc_base=acc_base,
        acc_novel=_weighted(per_class, counts, novel) if novel else math.nan,
        per_class=per_class,
        class_counts=counts,
        forgetting=forgetting,
        max_disp_ratio=max_disp_ratio,
    )


def embedding_separation(model: ParameterStore, classset: ClassSet, class_ids: Sequence[int]) -> float:
    """Mean within-class embedding variance over mean pairwise centroid distance, on test samples."""
    if len(class_ids) < 2:
        raise ConfigError("Separation needs at least two classes.")
    centroids, spreads = [], []
    for class_id in class_ids:
        embeddings = embed(model, classset.test(class_id))
        centroid = embeddings.mean(axis=0)
        centroids.append(centroid)
        spreads.append(float(((embeddings - centroid) ** 2).sum(axis=1).mean()))
    centroids = np.array(centroids)
    gaps = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    between = gaps[np.triu_indices(len(class_ids), k=1)].mean()
    return float(np.mean(spreads) / between) if between > 0 else math.inf


def embedding_scatter(
    model: ParameterStore, classset: ClassSet, class_ids: Sequence[int]
) -> List[Tuple[int, float, float]]:
    """Test embeddings projected on their first two principal directions."""
    blocks = [embed(model, classset.test(class_id)) for class_id in class_ids]
    labels = np.concatenate([np.full(block.shape[0], class_id) for class_id, block in zip(class_ids, blocks)])
    stacked = np.vstack(blocks)
    if stacked.shape[0] < 2 or stacked.shape[1] < 2:
        return []
    projected = PCA(n_components=2, svd_solver="full").fit_transform(stacked)
    return [(int(label), float(x), float(y)) for label, (x, y) in zip(labels, projected)]


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info("Stage '%s' started.", name)
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        logger.exception("Stage '%s' failed.", name)
        raise PipelineStageError(name, exc) from exc


def _session_config(config: RunConfig, plan: MethodPlan, model: ParameterStore) -> DmfConfig:
    if plan.adaptation == "none":
        return replace(config.dmf, iterations=0)
    if plan.adaptation == "finetune":
        return DmfConfig(
            lr=config.finetune_lr,
            max_step=config.dmf.max_step,
            damping=0.0,
            error_coef=0.0,
            alpha_min=0.0,
            alpha_max=0.0,
            tunable_top_layers=model.layer_count,
            iterations=config.dmf.iterations,
            adaptive_alpha=False,
        )
    return replace(config.dmf, adaptive_alpha=plan.adaptive_alpha)


def run_pipeline(config: RunConfig) -> RunResult:
    """Pre-train, then adapt session by session, evaluating on every class seen so far.

    ``RunResult.metrics`` holds one entry per session, session 0 included.
    """
    plan = PLANS[Method(config.method)]
    seeds = stream_seeds(config.seed)
    logger.info("Running %s.", config.run_name)

    with _stage("data"):
        classset = load_classset(config.dataset, seeds["data"])
        schedule = build_schedule(
            classset.class_ids, config.base_count, config.session_size, config.shots, seeds["schedule"]
        )
        base_ids = list(schedule.base_classes)
        model = ParameterStore.initialize(
            [classset.feature_dim, *config.hidden_dims, len(base_ids)], np.random.default_rng(seeds["init"])
        )
    ledger = classset.ledger
    implant = config.implant
    importance: Optional[ImportanceMatrix] = None
    pretrain_log: List[object] = []
    head_log: List[EpochRecord] = []

    ledger.enter("pretrain")
    with _stage("pretrain"):
        base = classset.subset(base_ids)
        episode_rng = np.random.default_rng(seeds["episodes"])
        if plan.implant:
            model, pretrain_log = implant_pretrain(
                model,
                base,
                implant.episodes,
                implant.way,
                config.shots,
                implant.query,
                implant.mix,
                implant.lr,
                seeds["episodes"],
                mix_space=implant.mix_space,
                metric=implant.metric,
                momentum=implant.momentum,
                mix_seed=seeds["mixup"],
            )
        else:
            model, pretrain_log = closed_set_pretrain(
                model,
                base,
                base_ids,
                implant.closed_set_epochs,
                implant.batch_size,
                implant.lr,
                implant.momentum,
                episode_rng,
            )
        model, head_log = fit_base_head(
            model, base, base_ids, implant.head_epochs, implant.lr, implant.batch_size, episode_rng, implant.momentum
        )
        if plan.importance == "learned":
            label_of = {class_id: row for row, class_id in enumerate(base_ids)}
            importance = estimate_importance(
                model,
                model,
                base.train_batch(base_ids, label_of),
                ImportanceMatrix.zeros_like(model),
                config.ascent_lr,
                config.adv_epochs,
            )
        elif plan.importance == "uniform":
            importance = ImportanceMatrix.ones_like(model)
    pretrained = model.clone()
    novel_ids = [class_id for group in schedule.sessions for class_id in group]
    with _stage("separation"):
        separation = embedding_separation(model, classset, novel_ids) if len(novel_ids) > 1 else math.nan

    head_classes = list(base_ids)
    with _stage("evaluate 0"):
        metrics = [evaluate(model, classset, head_classes, head_classes, base_ids, session=0)]
    logger.info("Session 0: acc_all=%.4f.", metrics[0].acc_all)
    session_logs: Dict[int, List[DmfRecord]] = {}
    reports: Dict[int, DisplacementReport] = {}
    shots_rng = np.random.default_rng(seeds["shots"])

    for session in range(1, schedule.session_count + 1):
        new_ids = list(schedule.classes_for(session))
        stage = f"session {session}"
        ledger.enter(stage)
        with _stage(stage):
            support = sample_support(classset, new_ids, config.shots, shots_rng, label_offset=len(head_classes))
            previous = model
            model, report, session_logs[session] = compress_adapt(
                previous,
                support,
                previous,
                importance if plan.adaptation == "dmf" else None,
                _session_config(config, plan, previous),
            )
            reports[session] = report
        head_classes.extend(new_ids)
        if plan.importance == "learned":
            ledger.enter(f"importance {session}")
            with _stage(f"importance {session}"):
                importance = estimate_importance(
                    model, previous, support, importance, config.ascent_lr, config.adv_epochs
                )
        elif plan.importance == "uniform":
            importance = ImportanceMatrix.ones_like(model)
        with _stage(f"evaluate {session}"):
            metrics.append(
                evaluate(
                    model,
                    classset,
                    head_classes,
                    head_classes,
                    base_ids,
                    session=session,
                    history=metrics,
                    max_disp_ratio=report.max_ratio,
                )
            )
        latest = metrics[-1]
        logger.info(
            "Session %d: acc_all=%.4f acc_base=%.4f acc_novel=%.4f forgetting=%.4f max_disp_ratio=%.4f.",
            session,
            latest.acc_all,
            latest.acc_base,
            latest.acc_novel,
            latest.forgetting,
            latest.max_disp_ratio,
        )

    with _stage("scatter"):
        scatter = embedding_scatter(model, classset, head_classes)

    return RunResult(
        config=config,
        schedule=schedule,
        metrics=metrics,
        model=model,
        pretrained=pretrained,
        head_classes=head_classes,
        pretrain_log=pretrain_log,
        head_log=head_log,
        session_logs=session_logs,
        reports=reports,
        importance=importance,
        separation=separation,
        scatter=scatter,
        access_counts=Counter(ledger.reads),
    )


def run_baseline(kind, config: RunConfig) -> RunResult:
    """Run one of the comparison methods under ``config``'s data, schedule and seed."""
    try:
        method = Method(kind)
    except ValueError:
        raise ConfigError(f"Unknown baseline {kind!r}.") from None
    if method not in BASELINE_KINDS:
        raise ConfigError(f"{method.value!r} is not a baseline; choose from {[k.value for k in BASELINE_KINDS]}.")
    return run_pipeline(replace(config, method=method))


def _format(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.8f}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format(value) for value in row])
    except OSError as exc:
        logger.exception("Failed to write %s.", path)
        raise OutputError(path, exc) from exc
    return path


def emit_outputs(result: RunResult, out_dir) -> Dict[str, Path]:
    """Write metrics, logs, scatter, importance and summary files into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(out_dir, exc) from exc
    paths: Dict[str, Path] = {}
    paths["metrics"] = _write_csv(
        out_dir / "metrics.csv", SessionMetrics.CSV_HEADER, (entry.as_row() for entry in result.metrics)
    )
    if result.pretrain_log:
        header = type(result.pretrain_log[0]).CSV_HEADER
        paths["pretrain_log"] = _write_csv(
            out_dir / "pretrain_log.csv", header, (record.as_row() for record in result.pretrain_log)
        )
    if result.head_log:
        paths["head_log"] = _write_csv(
            out_dir / "head_log.csv", EpochRecord.CSV_HEADER, (record.as_row() for record in result.head_log)
        )
    for session, records in result.session_logs.items():
        paths[f"session_{session}_log"] = _write_csv(
            out_dir / f"session_{session}_log.csv", DmfRecord.CSV_HEADER, (record.as_row() for record in records)
        )
    paths["scatter"] = _write_csv(out_dir / "scatter.csv", ("class", "x", "y"), result.scatter)
    if result.importance is not None:
        target = out_dir / "importance.csv"
        try:
            paths["importance"] = write_importance_csv(result.importance, target)
        except OSError as exc:
            raise OutputError(target, exc) from exc

    final = result.metrics[-1]
    alphas = [record.alpha for records in result.session_logs.values() for record in records]
    summary = {
        "method": result.config.method.value,
        "seed": result.config.seed,
        "sessions": len(result.metrics),
        "final": {name: _json_number(value) for name, value in zip(SessionMetrics.CSV_HEADER, final.as_row())},
        "novel_separation": _json_number(result.separation),
        "alpha_range": [min(alphas), max(alphas)] if alphas else None,
        "dataset": asdict(result.config.dataset),
    }
    target = out_dir / "summary.json"
    try:
        target.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OutputError(target, exc) from exc
    paths["summary"] = target
    logger.info("Wrote %d files to %s.", len(paths), out_dir)
    return paths


def _json_number(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _final_metrics(config: RunConfig) -> List[SessionMetrics]:
    return run_pipeline(config).metrics


def run_ablation(
    config: RunConfig, seeds: int, methods: Sequence[Method] = CORE_METHODS, workers: int = 1
) -> List[AblationRow]:
    """Median final metrics per method over seeds ``config.seed .. config.seed + seeds - 1``."""
    if seeds < 1:
        raise ConfigError("Ablation needs at least one seed.")
    jobs = [
        replace(config, method=Method(method), seed=config.seed + offset)
        for method in methods
        for offset in range(seeds)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_final_metrics, jobs))
    else:
        outcomes = [_final_metrics(job) for job in jobs]
    grouped: Dict[Method, List[List[SessionMetrics]]] = defaultdict(list)
    for job, metrics in zip(jobs, outcomes):
        grouped[job.method].append(metrics)
    rows = []
    for method in methods:
        runs = grouped[Method(method)]
        finals = [metrics[-1] for metrics in runs]
        rows.append(
            AblationRow(
                method=Method(method),
                seeds=len(runs),
                final_acc_all=float(np.median([m.acc_all for m in finals])),
                final_acc_base=float(np.median([m.acc_base for m in finals])),
                final_acc_novel=float(np.median([m.acc_novel for m in finals])),
                final_forgetting=float(np.median([m.forgetting for m in finals])),
                session_acc_all=tuple(
                    float(np.median([metrics[session].acc_all for metrics in runs])) for session in range(len(runs[0]))
                ),
            )
        )
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> Path:
    sessions = len(rows[0].session_acc_all) if rows else 0
    header = (
        "method",
        "seeds",
        "final_acc_all",
        "final_acc_base",
        "final_acc_novel",
        "final_forgetting",
        *(f"s{session}" for session in range(sessions)),
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow(
                    [
                        row.method.value,
                        row.seeds,
                        *(
                            _format(value)
                            for value in (
                                row.final_acc_all,
                                row.final_acc_base,
                                row.final_acc_novel,
                                row.final_forgetting,
                                *row.session_acc_all,
                            )
                        ),
                    ]
                )
    except OSError as exc:
        raise OutputError(path, exc) from exc
    return path


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'method':<18}{'acc_all':>9}{'acc_base':>10}{'acc_novel':>11}{'forgetting':>12}  per-session acc_all"]
    for row in rows:
        sessions = " ".join(f"{value * 100:5.1f}" for value in row.session_acc_all)
        lines.append(
            f"{row.method.value:<18}{row.final_acc_all:>9.4f}{row.final_acc_base:>10.4f}"
            f"{row.final_acc_novel:>11.4f}{row.final_forgetting:>12.4f}  {sessions}"
        )
    return "\n".join(lines)
