"""Meta-testing, the nearest-centroid baseline and the lambda sweep.

Every evaluation episode draws from its own stream
``("eval", role, task_index)``, so results do not depend on task order or
on how many worker processes share the work.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from math import fsum, sqrt
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from loguru import logger

from .autodiff import Graph
from .config import ExperimentConfig
from .episodes import Datasets, Episode, LabeledDataset, TaskDistribution
from .errors import DatasetError, FormatError
from .metalearners import MetaLearnerState, build_state, predict
from .models import Network, ParamStore, attach, build_discriminator, build_generator, discriminator_forward
from .seeding import child_seed, stream
from .trainer import run_training

Z_95 = 1.96
DEFAULT_LAMBDAS = (0.01, 0.1, 0.5, 1.0, 2.0, 10.0)
RESULT_FIELDS = ("method", "dataset", "n_way", "k_shot", "mean_acc", "ci95", "num_tasks")
SWEEP_FIELDS = ("lambda", "fewshot_acc", "fewshot_ci", "disc_acc")


def ci95(values: Sequence[float]) -> tuple[float, float]:
    """(mean, 1.96 * sample std / sqrt(n)); half-width 0 when all values agree."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("ci95 needs at least one value")
    if np.all(values == values[0]):
        return float(values[0]), 0.0
    mean = fsum(values) / values.size
    spread = fsum((values - mean) ** 2) / (values.size - 1)
    return mean, Z_95 * sqrt(spread) / sqrt(values.size)


@dataclass(frozen=True)
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    num_tasks: int
    per_task_accuracies: tuple = field(repr=False)

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float]) -> "EvalReport":
        mean, half = ci95(accuracies)
        return cls(mean, half, len(accuracies), tuple(float(a) for a in accuracies))


def features(network: Optional[Network], params: Optional[ParamStore], x: np.ndarray) -> np.ndarray:
    """G(x) as an array; the identity without a generator."""
    if network is None:
        return np.asarray(x, dtype=np.float64)
    graph = Graph()
    generator = attach(graph, network, params, "generator", trainable=False)
    (out,) = graph.eval([generator(graph.constant(x))])
    return out


def knn_centroid(network: Optional[Network], params: Optional[ParamStore], episode: Episode) -> np.ndarray:
    """Way labels of the queries by nearest (Euclidean) support centroid."""
    support = features(network, params, episode.support_x)
    query = features(network, params, episode.query_x)
    ways = np.arange(episode.n_way)
    if any(not np.any(episode.support_y == w) for w in ways):
        raise DatasetError("every way needs at least one support example")
    centroids = np.stack([support[episode.support_y == w].mean(axis=0) for w in ways])
    distances = np.sum((query[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    # argmin returns the lowest way on ties
    return np.argmin(distances, axis=1)


@dataclass(frozen=True)
class FewShotModel:
    """Parameter snapshot evaluated on episodes; ``state=None`` means nearest centroid."""

    generator: Optional[Network]
    generator_params: Optional[ParamStore]
    state: Optional[MetaLearnerState] = None

    def accuracy(self, episode: Episode) -> float:
        if self.state is None:
            predictions = knn_centroid(self.generator, self.generator_params, episode)
            return float(np.mean(predictions == episode.query_y))
        _, accuracy = predict(self.generator, self.generator_params, self.state, episode)
        return accuracy


def _evaluate_tasks(job: tuple) -> list[float]:
    model, dist, seed, role, indices = job
    return [model.accuracy(dist.sample(stream(seed, "eval", role, i))) for i in indices]


def meta_test(
    model: FewShotModel,
    dist: TaskDistribution,
    num_tasks: int,
    seed: int,
    role: str = "test",
    workers: int = 1,
) -> EvalReport:
    """Average per-task query accuracy over ``num_tasks`` sampled episodes."""
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be at least 1, got {num_tasks}")
    indices = list(range(num_tasks))
    if workers <= 1:
        accuracies = _evaluate_tasks((model, dist, seed, role, indices))
    else:
        chunks = [indices[w::workers] for w in range(workers) if indices[w::workers]]
        with ProcessPoolExecutor(max_workers=len(chunks)) as ex:
            parts = list(ex.map(_evaluate_tasks, [(model, dist, seed, role, c) for c in chunks]))
        accuracies = [0.0] * num_tasks
        for chunk, part in zip(chunks, parts):
            for i, acc in zip(chunk, part):
                accuracies[i] = acc
    report = EvalReport.from_accuracies(accuracies)
    logger.debug(f"meta_test({role}): {report.mean_accuracy:.4f} ± {report.ci95_halfwidth:.4f} over {num_tasks}")
    return report


def concept_accuracy(
    generator: Optional[Network],
    generator_params: Optional[ParamStore],
    discriminator: Network,
    discriminator_params: ParamStore,
    dataset: LabeledDataset,
    classes: np.ndarray,
) -> float:
    """Fraction of ``dataset`` whose D∘G argmax is its class (index into ``classes``)."""
    graph = Graph()
    g = attach(graph, generator, generator_params, "generator", trainable=False)
    d = attach(graph, discriminator, discriminator_params, "discriminator", trainable=False)
    logits = discriminator_forward(d.network, d.params, g(graph.constant(dataset.flat())))
    (values,) = graph.eval([logits])
    targets = np.searchsorted(classes, dataset.labels)
    return float(np.mean(np.argmax(values, axis=1) == targets))


METHOD_NAMES = {"decaf-frozen": "decaf", "pretrain-only": "decaf"}


def method_label(config: ExperimentConfig, knn: bool = False) -> str:
    """Results-table label such as ``deml+metasgd`` or ``decaf+knn``."""
    mode = METHOD_NAMES.get(config.train.mode, config.train.mode)
    return f"{mode}+{'knn' if knn else config.train.meta_learner}"


def model_from_stores(config: ExperimentConfig, stores: dict, input_dim: int, knn: bool = False) -> FewShotModel:
    """Rebuild the evaluated model from checkpoint stores and their run config."""
    generator = None
    if "generator" in stores:
        generator = build_generator(config.generator, input_dim)
    if knn:
        return FewShotModel(generator, stores.get("generator"))
    if "learner" not in stores:
        raise FormatError("checkpoint has no learner tensors; use the knn baseline")
    feature_dim = input_dim if generator is None else generator.output_dim
    fresh = build_state(config, feature_dim, seed=0)
    if not stores["learner"].congruent(fresh.params):
        raise FormatError(
            f"learner tensors {stores['learner'].shapes()} do not match the configured learner {fresh.params.shapes()}"
        )
    state = fresh.with_stores(stores)
    return FewShotModel(generator, stores.get("generator"), state)


def lambda_sweep(
    config: ExperimentConfig,
    lambdas: Sequence[float],
    datasets: Datasets,
    num_tasks: int = 600,
) -> list[dict]:
    """Train one deml model per lambda and score its best-validation stores."""
    if not lambdas or any(lam < 0 for lam in lambdas):
        raise ValueError("lambda values must be a non-empty list of non-negative numbers")
    if datasets.concept is None:
        raise DatasetError("the lambda sweep needs a concept dataset")
    holdout = datasets.concept_holdout
    if holdout is None:
        logger.warning("No held-out concept split, reporting discrimination accuracy on training instances")
        holdout = datasets.concept
    episodes = config.episodes
    test_dist = datasets.distribution("test", episodes.n_way, episodes.k_shot, episodes.test_queries)
    classes = np.array(datasets.concept.classes, dtype=np.int64)

    rows = []
    for index, lam in enumerate(lambdas):
        run_config = replace(config, train=replace(config.train, mode="deml", lam=float(lam)))
        run_seed = child_seed(config.seed, "sweep", index)
        result = run_training(run_config, datasets, seed=run_seed)
        stores = result.selected_stores
        model = model_from_stores(run_config, stores, datasets.meta.input_dim)
        report = meta_test(model, test_dist, num_tasks, config.seed, workers=config.workers)
        disc_acc = concept_accuracy(
            model.generator,
            stores["generator"],
            build_discriminator(run_config.generator.feature_dim, len(classes)),
            stores["discriminator"],
            holdout,
            classes,
        )
        rows.append(
            {
                "lambda": float(lam),
                "fewshot_acc": report.mean_accuracy,
                "fewshot_ci": report.ci95_halfwidth,
                "disc_acc": disc_acc,
            }
        )
        logger.info(
            f"lambda={lam}: fewshot {report.mean_accuracy:.4f} ± {report.ci95_halfwidth:.4f}, "
            f"concept {disc_acc:.4f}"
        )
    return rows


def _number(value: float) -> str:
    return f"{value:.6f}"


def results_row(method: str, dataset: str, n_way: int, k_shot: int, report: EvalReport) -> dict:
    return {
        "method": method,
        "dataset": dataset,
        "n_way": n_way,
        "k_shot": k_shot,
        "mean_acc": _number(report.mean_accuracy),
        "ci95": _number(report.ci95_halfwidth),
        "num_tasks": report.num_tasks,
    }


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[dict], append: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        if header:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_results(rows: Sequence[dict], path: Path, append: bool = False) -> None:
    _write_csv(path, RESULT_FIELDS, rows, append)
    logger.info(f"Wrote {len(rows)} result row(s) to {path}")


def write_sweep(rows: Sequence[dict], path: Path) -> None:
    formatted = [{key: _number(row[key]) for key in SWEEP_FIELDS} for row in rows]
    _write_csv(path, SWEEP_FIELDS, formatted, append=False)
    logger.info(f"Wrote lambda sweep to {path}")
