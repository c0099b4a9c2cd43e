"""Datasets, meta-splits and the episodic task distribution.

Also generates the synthetic benchmark: every class has a concept prototype
that a fixed random linear map renders into part of the input space, and
the remaining input coordinates carry nuisance noise a good concept
generator has to learn to ignore.
"""

from dataclasses import dataclass
from math import sqrt
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from loguru import logger

from . import formats
from .config import ExperimentConfig
from .errors import DatasetError, EpisodeError
from .seeding import stream


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LabeledDataset:
    examples: np.ndarray
    labels: np.ndarray
    class_index: dict

    @classmethod
    def from_arrays(cls, examples, labels) -> "LabeledDataset":
        examples = np.array(examples, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if examples.ndim < 2:
            raise DatasetError(f"examples must be [num, ...], got shape {examples.shape}")
        if labels.shape != (examples.shape[0],):
            raise DatasetError(f"{labels.shape[0]} labels for {examples.shape[0]} examples")
        if not np.all(np.isfinite(examples)):
            raise DatasetError("examples contain non-finite values")
        index = {
            int(c): _readonly(np.flatnonzero(labels == c)) for c in np.unique(labels)
        }
        return cls(_readonly(examples), _readonly(labels), index)

    @property
    def num_examples(self) -> int:
        return self.examples.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    @property
    def example_shape(self) -> tuple:
        return self.examples.shape[1:]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.example_shape))

    def flat(self, indices=None) -> np.ndarray:
        """Examples (optionally a subset) as [rows, input_dim]."""
        rows = self.examples if indices is None else self.examples[indices]
        return rows.reshape(rows.shape[0], -1)

    def merge(self, other: "LabeledDataset") -> "LabeledDataset":
        overlap = set(self.class_index) & set(other.class_index)
        if overlap:
            raise DatasetError(f"cannot merge datasets sharing classes {sorted(overlap)[:5]}")
        if self.example_shape != other.example_shape:
            raise DatasetError(f"example shapes differ: {self.example_shape} vs {other.example_shape}")
        return LabeledDataset.from_arrays(
            np.concatenate([self.examples, other.examples]),
            np.concatenate([self.labels, other.labels]),
        )


@dataclass(frozen=True)
class MetaSplit:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        roles = {"train": set(self.train), "val": set(self.val), "test": set(self.test)}
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            shared = roles[a] & roles[b]
            if shared:
                raise DatasetError(f"meta-split {a}/{b} share classes {sorted(shared)}")

    def classes(self, role: str) -> tuple:
        if role not in ("train", "val", "test"):
            raise DatasetError(f"unknown split role '{role}'")
        return getattr(self, role)

    def check(self, dataset: LabeledDataset) -> None:
        unknown = set(self.train + self.val + self.test) - set(dataset.class_index)
        if unknown:
            raise DatasetError(f"split names classes absent from the dataset: {sorted(unknown)}")


@dataclass(frozen=True)
class Episode:
    """One N-way task; labels are way indices in [0, N)."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way_map: tuple
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.way_map)


class TaskDistribution:
    """p(T): N-way K-shot episodes with Q queries per class over a class pool."""

    def __init__(
        self,
        dataset: LabeledDataset,
        classes: Sequence[int],
        n_way: int,
        k_shot: int,
        n_query: int,
        rng: Optional[np.random.Generator] = None,
    ):
        self.dataset = dataset
        self.classes = np.array(sorted(int(c) for c in classes), dtype=np.int64)
        self.n_way = n_way
        self.k_shot = k_shot
        self.n_query = n_query
        self.rng = rng if rng is not None else np.random.default_rng(0)

        if k_shot < 1 or n_query < 1:
            raise DatasetError(f"k_shot and n_query must be positive, got {k_shot}, {n_query}")
        if not 1 <= n_way <= len(self.classes):
            raise DatasetError(f"{n_way}-way tasks need at least {n_way} classes, pool has {len(self.classes)}")
        for c in self.classes:
            available = len(dataset.class_index.get(int(c), ()))
            if available < k_shot + n_query:
                raise EpisodeError(int(c), available, k_shot + n_query)

    def sample(self, rng: Optional[np.random.Generator] = None) -> Episode:
        rng = rng if rng is not None else self.rng
        chosen = np.sort(rng.choice(self.classes, size=self.n_way, replace=False))
        support, query = [], []
        for c in chosen:
            picks = rng.choice(self.dataset.class_index[int(c)], size=self.k_shot + self.n_query, replace=False)
            support.append(picks[:self.k_shot])
            query.append(picks[self.k_shot:])
        support_index = np.concatenate(support)
        query_index = np.concatenate(query)
        ways = np.arange(self.n_way)
        return Episode(
            support_x=self.dataset.flat(support_index),
            support_y=np.repeat(ways, self.k_shot),
            query_x=self.dataset.flat(query_index),
            query_y=np.repeat(ways, self.n_query),
            way_map=tuple(int(c) for c in chosen),
            support_index=support_index,
            query_index=query_index,
        )


def sample_episode(dist: TaskDistribution, rng: Optional[np.random.Generator] = None) -> Episode:
    return dist.sample(rng)


def sample_instance_batch(
    dataset: LabeledDataset, m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """m uniform draws with replacement: ([m, input_dim], labels)."""
    if dataset.num_examples == 0:
        raise DatasetError("cannot sample from an empty dataset")
    if m < 1:
        raise DatasetError(f"instance batch size must be positive, got {m}")
    picks = rng.integers(0, dataset.num_examples, size=m)
    return dataset.flat(picks), dataset.labels[picks]


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int
    per_class: int
    input_dim: int = 32
    concept_dim: int = 8
    nuisance_dim: int = 16
    noise: float = 0.1
    class_offset: int = 0

    @property
    def rendered_dim(self) -> int:
        return self.input_dim - self.nuisance_dim

    def check(self) -> None:
        if self.num_classes < 1 or self.per_class < 1:
            raise DatasetError("num_classes and per_class must be positive")
        if self.concept_dim < 1 or not 0 <= self.nuisance_dim < self.input_dim:
            raise DatasetError(
                f"invalid dims: input {self.input_dim}, concept {self.concept_dim}, nuisance {self.nuisance_dim}"
            )
        if self.noise < 0:
            raise DatasetError(f"noise must be non-negative, got {self.noise}")


def rendering_map(config: SyntheticConfig, seed: int, independent: bool = False) -> np.ndarray:
    """The [concept_dim, rendered_dim] map shared by every dataset of a world."""
    labels = ("data", "render", "independent") if independent else ("data", "render")
    rng = stream(seed, *labels)
    return rng.normal(0.0, 1.0 / sqrt(config.concept_dim), size=(config.concept_dim, config.rendered_dim))


def gen_synthetic(config: SyntheticConfig, seed: int, independent_rendering: bool = False) -> LabeledDataset:
    """Examples [(mu_c + eps) @ A ; eta] with class ids offset by ``class_offset``."""
    config.check()
    render = rendering_map(config, seed, independent_rendering)
    role = config.class_offset
    prototypes = stream(seed, "data", "prototypes", role).normal(size=(config.num_classes, config.concept_dim))
    noise_rng = stream(seed, "data", "noise", role)

    labels = np.repeat(np.arange(config.num_classes), config.per_class)
    concepts = prototypes[labels] + config.noise * noise_rng.normal(size=(labels.size, config.concept_dim))
    nuisance = noise_rng.normal(size=(labels.size, config.nuisance_dim))
    examples = np.concatenate([concepts @ render, nuisance], axis=1)
    logger.debug(
        f"Generated {config.num_classes} synthetic classes x {config.per_class} "
        f"(offset {config.class_offset}, seed {seed})"
    )
    return LabeledDataset.from_arrays(examples, labels + config.class_offset)


def make_disjoint_concept_dataset(
    config: SyntheticConfig, seed: int, independent_rendering: bool = False
) -> LabeledDataset:
    """Concept-discrimination classes disjoint from the meta classes.

    ``config.class_offset`` must lie past every meta class id; the rendering
    map is shared with the meta dataset unless ``independent_rendering``.
    """
    if config.class_offset < 1:
        raise DatasetError("concept dataset needs a positive class offset past the meta classes")
    return gen_synthetic(config, seed, independent_rendering)


def split_holdout(
    dataset: LabeledDataset, fraction: float, rng: np.random.Generator
) -> tuple[LabeledDataset, Optional[LabeledDataset]]:
    """Hold out ``fraction`` of every class (at least one example kept for training)."""
    if fraction <= 0:
        return dataset, None
    keep, held = [], []
    for c in dataset.classes:
        idx = rng.permutation(dataset.class_index[c])
        count = min(len(idx) - 1, int(round(fraction * len(idx))))
        held.append(idx[:count])
        keep.append(idx[count:])
    keep = np.sort(np.concatenate(keep))
    held = np.sort(np.concatenate(held))
    if held.size == 0:
        return dataset, None
    train = LabeledDataset.from_arrays(dataset.examples[keep], dataset.labels[keep])
    holdout = LabeledDataset.from_arrays(dataset.examples[held], dataset.labels[held])
    return train, holdout


@dataclass(frozen=True)
class Datasets:
    meta: LabeledDataset
    split: MetaSplit
    concept: Optional[LabeledDataset] = None
    concept_holdout: Optional[LabeledDataset] = None

    def distribution(self, role: str, n_way: int, k_shot: int, n_query: int, rng=None, extra=None):
        """Task distribution over one split role (``extra`` adds concept classes)."""
        dataset, classes = self.meta, list(self.split.classes(role))
        if extra is not None:
            dataset = dataset.merge(extra)
            classes += extra.classes
        return TaskDistribution(dataset, classes, n_way, k_shot, n_query, rng)


def load_dataset(path: Path) -> LabeledDataset:
    examples, labels = formats.read_dataset(path)
    return LabeledDataset.from_arrays(examples, labels)


def save_dataset(dataset: LabeledDataset, path: Path) -> None:
    formats.write_dataset(path, dataset.examples, dataset.labels)


def load_split(path: Path) -> MetaSplit:
    roles = formats.read_split(path)
    return MetaSplit(tuple(roles["train"]), tuple(roles["val"]), tuple(roles["test"]))


def save_split(split: MetaSplit, path: Path) -> None:
    formats.write_split(path, {"train": list(split.train), "val": list(split.val), "test": list(split.test)})


def synthetic_benchmark(config: ExperimentConfig) -> tuple[LabeledDataset, MetaSplit, LabeledDataset]:
    """Meta dataset, its split and the disjoint concept dataset from ``[data]``."""
    data = config.data
    total = data.train_classes + data.val_classes + data.test_classes
    meta_config = SyntheticConfig(
        num_classes=total,
        per_class=data.per_class,
        input_dim=data.input_dim,
        concept_dim=data.concept_dim,
        nuisance_dim=data.nuisance_dim,
        noise=data.noise,
    )
    meta = gen_synthetic(meta_config, config.seed)
    ids = list(range(total))
    split = MetaSplit(
        tuple(ids[:data.train_classes]),
        tuple(ids[data.train_classes:data.train_classes + data.val_classes]),
        tuple(ids[data.train_classes + data.val_classes:]),
    )
    concept_config = SyntheticConfig(
        num_classes=data.concept_classes,
        per_class=data.concept_per_class,
        input_dim=data.input_dim,
        concept_dim=data.concept_dim,
        nuisance_dim=data.nuisance_dim,
        noise=data.noise,
        class_offset=total,
    )
    concept = make_disjoint_concept_dataset(concept_config, config.seed, data.independent_rendering)
    return meta, split, concept


def build_datasets(config: ExperimentConfig) -> Datasets:
    """Load the configured DMLD files, or synthesize the benchmark."""
    data = config.data
    if data.meta_dataset is not None:
        meta = load_dataset(data.meta_dataset)
        split = load_split(data.split_manifest)
        concept = load_dataset(data.concept_dataset) if data.concept_dataset else None
        logger.info(f"Loaded meta dataset {data.meta_dataset} ({meta.num_examples} examples)")
    else:
        meta, split, concept = synthetic_benchmark(config)
        logger.info(
            f"Synthesized benchmark: {len(meta.classes)} meta classes, "
            f"{len(concept.classes)} concept classes"
        )
    split.check(meta)
    holdout = None
    if concept is not None:
        shared = set(concept.class_index) & set(meta.class_index)
        if shared:
            raise DatasetError(f"concept and meta datasets share classes {sorted(shared)[:5]}")
        concept, holdout = split_holdout(concept, data.concept_holdout, stream(config.seed, "data", "holdout"))
    return Datasets(meta, split, concept, holdout)
