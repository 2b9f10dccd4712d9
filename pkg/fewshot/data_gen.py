"""Labeled class-conditional feature data: generators, CSV ingestion, schedules and episodes."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.datasets import make_blobs

from .errors import ConfigError, DatasetParseError, SamplingError
from .nn_engine import Batch

logger = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.2


@dataclass
class AccessLedger:
    """Counts train-split reads per (stage, class id)."""

    stage: str = "setup"
    reads: Counter = field(default_factory=Counter)

    def enter(self, stage: str) -> None:
        self.stage = stage

    def record(self, class_id: int, rows: int) -> None:
        self.reads[(self.stage, int(class_id))] += rows

    def classes_read(self, stage: str) -> Set[int]:
        return {class_id for (name, class_id), count in self.reads.items() if name == stage and count}


class ClassSet:
    """Samples grouped by class id, with a per-class train/test split fixed at creation."""

    def __init__(
        self,
        classes: Mapping[int, np.ndarray],
        test_fraction: float = DEFAULT_TEST_FRACTION,
        seed: int = 0,
        ledger: Optional[AccessLedger] = None,
    ) -> None:
        if not classes:
            raise ConfigError("A class set needs at least one class.")
        if not 0.0 <= test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}.")
        samples: Dict[int, np.ndarray] = {}
        for class_id, rows in classes.items():
            matrix = np.array(rows, dtype=np.float64, ndmin=2)
            if matrix.shape[0] < 1:
                raise ConfigError(f"Class {class_id} has no samples.")
            samples[int(class_id)] = matrix
        widths = {matrix.shape[1] for matrix in samples.values()}
        if len(widths) != 1:
            raise ConfigError(f"Classes disagree on feature dimension: {sorted(widths)}.")
        if len(samples) != len(classes):
            raise ConfigError("Class ids must be unique integers.")
        self._samples = samples
        self.feature_dim = widths.pop()
        self.test_fraction = test_fraction
        self.ledger = ledger or AccessLedger()
        rng = np.random.default_rng(seed)
        self._train_index: Dict[int, np.ndarray] = {}
        self._test_index: Dict[int, np.ndarray] = {}
        for class_id in sorted(samples):
            count = samples[class_id].shape[0]
            order = rng.permutation(count)
            held_out = min(int(round(count * test_fraction)), count - 1)
            self._test_index[class_id] = np.sort(order[:held_out])
            self._train_index[class_id] = np.sort(order[held_out:])

    @property
    def class_ids(self) -> List[int]:
        return sorted(self._samples)

    def __len__(self) -> int:
        return len(self._samples)

    def samples(self, class_id: int) -> np.ndarray:
        return self._samples[class_id]

    def train(self, class_id: int) -> np.ndarray:
        rows = self._samples[class_id][self._train_index[class_id]]
        self.ledger.record(class_id, rows.shape[0])
        return rows

    def test(self, class_id: int) -> np.ndarray:
        return self._samples[class_id][self._test_index[class_id]]

    def train_count(self, class_id: int) -> int:
        return int(self._train_index[class_id].shape[0])

    def subset(self, class_ids: Iterable[int]) -> "ClassSet":
        """A view over some classes that shares samples, splits and ledger."""
        wanted = [int(class_id) for class_id in class_ids]
        missing = [class_id for class_id in wanted if class_id not in self._samples]
        if missing:
            raise ConfigError(f"Unknown class ids {missing}.")
        view = object.__new__(ClassSet)
        view._samples = {class_id: self._samples[class_id] for class_id in wanted}
        view._train_index = {class_id: self._train_index[class_id] for class_id in wanted}
        view._test_index = {class_id: self._test_index[class_id] for class_id in wanted}
        view.feature_dim = self.feature_dim
        view.test_fraction = self.test_fraction
        view.ledger = self.ledger
        return view

    def train_batch(self, class_ids: Sequence[int], label_of: Mapping[int, int]) -> Batch:
        """Every train sample of ``class_ids`` labeled through ``label_of``."""
        inputs = [self.train(class_id) for class_id in class_ids]
        labels = [np.full(rows.shape[0], label_of[class_id]) for class_id, rows in zip(class_ids, inputs)]
        return Batch(np.vstack(inputs), np.concatenate(labels))

    def test_batch(self, class_ids: Sequence[int], label_of: Mapping[int, int]) -> Batch:
        inputs = [self.test(class_id) for class_id in class_ids]
        labels = [np.full(rows.shape[0], label_of[class_id]) for class_id, rows in zip(class_ids, inputs)]
        return Batch(np.vstack(inputs), np.concatenate(labels))


@dataclass(frozen=True)
class SessionSchedule:
    base_classes: Tuple[int, ...]
    sessions: Tuple[Tuple[int, ...], ...]
    shots_per_class: int

    def __post_init__(self) -> None:
        groups = [self.base_classes, *self.sessions]
        if any(len(group) == 0 for group in groups):
            raise ConfigError("Base and session class lists must be non-empty.")
        flat = [class_id for group in groups for class_id in group]
        if len(flat) != len(set(flat)):
            raise ConfigError("Schedule class lists must be pairwise disjoint.")
        if self.shots_per_class < 1:
            raise ConfigError("shots_per_class must be at least 1.")

    @property
    def session_count(self) -> int:
        return len(self.sessions)

    def classes_for(self, session: int) -> Tuple[int, ...]:
        return self.base_classes if session == 0 else self.sessions[session - 1]

    def seen_through(self, session: int) -> List[int]:
        seen = list(self.base_classes)
        for group in self.sessions[:session]:
            seen.extend(group)
        return seen


@dataclass(frozen=True)
class Episode:
    support_inputs: np.ndarray
    support_labels: np.ndarray
    query_inputs: np.ndarray
    query_labels: np.ndarray
    class_ids: Tuple[int, ...]
    way: int
    shot: int
    query_per_class: int


def make_blob_classes(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    center_scale: float,
    spread: float,
    seed: int,
    test_fraction: float = DEFAULT_TEST_FRACTION,
) -> ClassSet:
    """Isotropic Gaussian classes around centers drawn uniformly from ``[-center_scale, center_scale]^dim``."""
    if num_classes < 2 or dim < 2 or samples_per_class < 1:
        raise ConfigError(
            "Need num_classes >= 2, dim >= 2 and samples_per_class >= 1; "
            f"got {num_classes}, {dim}, {samples_per_class}."
        )
    if not spread > 0 or center_scale < 0:
        raise ConfigError(f"spread must be positive and center_scale non-negative; got {spread}, {center_scale}.")
    features, labels = make_blobs(
        n_samples=[samples_per_class] * num_classes,
        n_features=dim,
        centers=None,
        cluster_std=spread,
        center_box=(-center_scale, center_scale),
        shuffle=False,
        random_state=seed,
    )
    classes = {class_id: features[labels == class_id] for class_id in range(num_classes)}
    return ClassSet(classes, test_fraction=test_fraction, seed=seed)


def load_dataset_csv(path, test_fraction: float = DEFAULT_TEST_FRACTION, seed: int = 0) -> ClassSet:
    """Parse ``label,f0,...,f{D-1}`` rows into a ClassSet."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file {path} does not exist.")
    grouped: Dict[int, List[List[float]]] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or header[0].strip() != "label" or len(header) < 2:
            raise DatasetParseError(path, 1, "header must read 'label,f0,f1,...'.")
        width = len(header) - 1
        for row in reader:
            if not any(cell.strip() for cell in row):
                continue
            if len(row) - 1 != width:
                raise DatasetParseError(path, reader.line_num, f"expected {width} features, found {len(row) - 1}.")
            try:
                label = int(row[0])
            except ValueError:
                raise DatasetParseError(path, reader.line_num, f"label {row[0]!r} is not an integer.") from None
            try:
                features = [float(cell) for cell in row[1:]]
            except ValueError:
                raise DatasetParseError(path, reader.line_num, "features must be decimal numbers.") from None
            grouped.setdefault(label, []).append(features)
    if not grouped:
        raise DatasetParseError(path, 2, "no data rows.")
    logger.info("Loaded %d classes from %s.", len(grouped), path)
    return ClassSet({label: np.array(rows) for label, rows in grouped.items()}, test_fraction=test_fraction, seed=seed)


def write_dataset_csv(classset: ClassSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", *(f"f{index}" for index in range(classset.feature_dim))])
        for class_id in classset.class_ids:
            for sample in classset.samples(class_id):
                writer.writerow([class_id, *(repr(float(value)) for value in sample)])
    return path


def build_schedule(
    class_ids: Sequence[int], base_count: int, session_size: int, k: int, seed: int
) -> SessionSchedule:
    """Seeded shuffle, then base classes followed by equal-size sessions."""
    ids = [int(class_id) for class_id in class_ids]
    if len(ids) != len(set(ids)):
        raise ConfigError("Class ids must be unique.")
    if base_count < 1 or session_size < 1:
        raise ConfigError("base_count and session_size must be at least 1.")
    remainder = len(ids) - base_count
    if remainder < session_size or remainder % session_size:
        raise ConfigError(
            f"{len(ids)} classes cannot split into {base_count} base classes plus sessions of {session_size}."
        )
    order = [int(class_id) for class_id in np.random.default_rng(seed).permutation(ids)]
    sessions = tuple(
        tuple(sorted(order[start : start + session_size])) for start in range(base_count, len(order), session_size)
    )
    return SessionSchedule(tuple(sorted(order[:base_count])), sessions, k)


def sample_episode(classset: ClassSet, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """n classes without replacement, then k support and q query train rows per class."""
    if n < 1 or k < 1 or q < 1:
        raise ConfigError(f"Episode sizes must be positive; got n={n}, k={k}, q={q}.")
    if len(classset) < n:
        raise SamplingError(f"Episode asks for {n} classes but only {len(classset)} are available.")
    chosen = [int(class_id) for class_id in rng.choice(classset.class_ids, size=n, replace=False)]
    support, query = [], []
    for class_id in chosen:
        available = classset.train_count(class_id)
        if available < k + q:
            raise SamplingError(f"Class {class_id} has {available} train samples; {k + q} are needed.")
        rows = classset.train(class_id)
        picked = rng.choice(available, size=k + q, replace=False)
        support.append(rows[picked[:k]])
        query.append(rows[picked[k:]])
    locals_ = np.arange(n)
    return Episode(
        support_inputs=np.vstack(support),
        support_labels=np.repeat(locals_, k),
        query_inputs=np.vstack(query),
        query_labels=np.repeat(locals_, q),
        class_ids=tuple(chosen),
        way=n,
        shot=k,
        query_per_class=q,
    )


def sample_support(
    classset: ClassSet, class_ids: Sequence[int], k: int, rng: np.random.Generator, label_offset: int = 0
) -> Batch:
    """k train rows per class, labeled ``label_offset + position`` in ``class_ids``."""
    inputs, labels = [], []
    for position, class_id in enumerate(class_ids):
        available = classset.train_count(class_id)
        if available < k:
            raise SamplingError(f"Class {class_id} has {available} train samples; {k} shots are needed.")
        rows = classset.train(class_id)
        inputs.append(rows[rng.choice(available, size=k, replace=False)])
        labels.append(np.full(k, label_offset + position))
    return Batch(np.vstack(inputs), np.concatenate(labels))
