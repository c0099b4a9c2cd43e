"""Joint training of generator, discriminator and meta-learner.

Every iteration samples a batch of meta-training tasks and a batch of
concept instances, builds ``J = mean task loss + lambda * discrimination
loss`` on one graph and applies a single Adam step to every trainable
store. The ``mode`` decides which stores exist and which are trainable.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from loguru import logger

from . import formats
from .autodiff import Graph, Node
from .config import ExperimentConfig
from .episodes import Datasets, Episode, sample_instance_batch
from .errors import DeepMetaError, NonFiniteError, ShapeError, TrainingError
from .metalearners import BoundLearner, MetaLearnerState, build_state, meta_loss
from .models import (
    Attached,
    Network,
    ParamStore,
    attach,
    build_discriminator,
    build_generator,
    discriminator_forward,
    init_params,
)
from .seeding import child_seed, stream

LOG_FIELDS = ("iter", "meta_loss", "disc_loss", "val_acc")


@dataclass
class AdamState:
    """First/second moments per tensor plus the step count."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamStore, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        zeros = {name: np.zeros(value.shape) for name, value in params.items()}
        return cls(zeros, {n: z.copy() for n, z in zeros.items()}, 0, beta1, beta2, epsilon)


def adam_update(adam: AdamState, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    """One bias-corrected Adam step; advances ``adam`` in place."""
    for name, value in params.items():
        if name not in grads or np.shape(grads[name]) != value.shape:
            raise ShapeError("adam", [value.shape, np.shape(grads.get(name, ()))], name)
    adam.t += 1
    correction1 = 1.0 - adam.beta1 ** adam.t
    correction2 = 1.0 - adam.beta2 ** adam.t
    updated = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        adam.m[name] = adam.beta1 * adam.m[name] + (1.0 - adam.beta1) * g
        adam.v[name] = adam.beta2 * adam.v[name] + (1.0 - adam.beta2) * g * g
        m_hat = adam.m[name] / correction1
        v_hat = adam.v[name] / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + adam.epsilon)
    return ParamStore(updated, params.rng_seed)


@dataclass(frozen=True)
class LossTerms:
    total: Node
    meta: Optional[Node] = None
    disc: Optional[Node] = None


def discrimination_loss(generator: Attached, discriminator: Attached, x: np.ndarray, targets: np.ndarray) -> Node:
    """Mean cross-entropy of D(G(x)) against one-hot ``targets``."""
    graph = discriminator.nodes()[0].graph
    logits = discriminator_forward(discriminator.network, discriminator.params, generator(graph.constant(x)))
    return graph.mean(graph.cross_entropy(logits, graph.constant(targets)))


def combined_loss(
    generator: Attached,
    discriminator: Optional[Attached],
    learner: BoundLearner,
    tasks: Sequence[Episode],
    instances: Optional[tuple] = None,
    lam: float = 1.0,
) -> LossTerms:
    """J = (1/n) sum of task losses + lam * discrimination loss.

    ``instances`` is ``(x, one-hot targets)``. With ``lam == 0`` the
    discrimination term is still built for logging but left out of J.
    """
    if not tasks:
        raise TrainingError("combined loss needs at least one task")
    graph = learner.graph
    losses = [meta_loss(generator, learner, task) for task in tasks]
    meta = losses[0].loss
    for item in losses[1:]:
        meta = graph.add(meta, item.loss)
    meta = graph.scale(meta, 1.0 / len(losses))

    disc = None
    if discriminator is not None and instances is not None:
        disc = discrimination_loss(generator, discriminator, *instances)
    total = meta
    if disc is not None and lam > 0:
        total = graph.add(meta, graph.scale(disc, lam))
    return LossTerms(total, meta, disc)


@dataclass
class LogRow:
    iter: int
    meta_loss: Optional[float] = None
    disc_loss: Optional[float] = None
    val_acc: Optional[float] = None


@dataclass
class TrainingResult:
    stores: dict
    log: list = field(default_factory=list)
    best_stores: Optional[dict] = None
    best_val_acc: Optional[float] = None
    best_iter: Optional[int] = None
    concept_acc: Optional[float] = None

    @property
    def selected_stores(self) -> dict:
        """The best-validation stores, or the final ones when nothing was validated."""
        return self.best_stores if self.best_stores is not None else self.stores


class Trainer:
    """Owns the trainable stores and their Adam states for one run."""

    def __init__(self, config: ExperimentConfig, datasets: Datasets, seed: Optional[int] = None):
        self.config = config
        self.datasets = datasets
        self.seed = config.seed if seed is None else seed
        self.mode = config.train.mode
        self.lam = config.train.effective_lambda
        self._check_datasets()

        input_dim = datasets.meta.input_dim
        train = config.train
        self.generator_net: Optional[Network] = None
        self.discriminator_net: Optional[Network] = None
        self.stores: dict[str, ParamStore] = {}
        self.frozen: set[str] = set()

        if self.mode != "vanilla":
            self.generator_net = build_generator(config.generator, input_dim)
            self.stores["generator"] = init_params(self.generator_net, child_seed(self.seed, "init", "generator"))
        if self.mode in ("deml", "pretrain-only"):
            self.concept_classes = np.array(datasets.concept.classes, dtype=np.int64)
            self.discriminator_net = build_discriminator(config.generator.feature_dim, len(self.concept_classes))
            self.stores["discriminator"] = init_params(
                self.discriminator_net, child_seed(self.seed, "init", "discriminator")
            )
        if self.mode.startswith("decaf"):
            self.stores["generator"] = self._pretrained_generator()
            if self.mode == "decaf-frozen":
                self.frozen.add("generator")

        self.state: Optional[MetaLearnerState] = None
        if self.mode != "pretrain-only":
            feature_dim = input_dim if self.generator_net is None else self.generator_net.output_dim
            self.state = build_state(config, feature_dim, child_seed(self.seed, "init", "learner"))
            self.stores.update(self.state.stores())

        self.adam = {
            name: AdamState.fresh(store, train.beta1, train.beta2, train.epsilon)
            for name, store in self.stores.items()
            if name not in self.frozen
        }
        logger.debug(
            f"Trainer({self.mode}): stores "
            + ", ".join(f"{n}={s.num_parameters}" for n, s in self.stores.items())
            + (f", frozen {sorted(self.frozen)}" if self.frozen else "")
        )

    def _check_datasets(self) -> None:
        needs_concept = self.mode in ("deml", "pretrain-only") or (
            self.mode.startswith("decaf") and self.config.train.pretrained_checkpoint is None
        )
        if self.config.train.merge_concept_classes and self.mode != "deep-vanilla":
            raise TrainingError("merge_concept_classes applies to deep-vanilla only")
        if self.config.train.merge_concept_classes:
            needs_concept = True
        if needs_concept and self.datasets.concept is None:
            raise TrainingError(f"mode '{self.mode}' needs a concept dataset")
        if self.datasets.meta is None:
            raise TrainingError("no meta-learning dataset")

    def _pretrained_generator(self) -> ParamStore:
        expected = self.stores["generator"]
        path = self.config.train.pretrained_checkpoint
        if path is not None:
            stores = formats.load_checkpoint(path)
            if "generator" not in stores:
                raise TrainingError(f"checkpoint {path} has no generator tensors")
            loaded = stores["generator"]
            logger.info(f"Loaded pretrained generator from {path}")
        else:
            logger.info(f"No pretrained checkpoint, pretraining D∘G for {self.config.train.pretrain_iterations} iterations")
            loaded = pretrain(self.config, self.datasets, child_seed(self.seed, "pretrain"))["generator"]
        if not loaded.congruent(expected):
            raise TrainingError(
                f"pretrained generator does not match the configured architecture: "
                f"{loaded.shapes()} vs {expected.shapes()}"
            )
        return loaded

    # -- one iteration -----------------------------------------------------

    def _attach(self, graph: Graph) -> tuple:
        generator = attach(graph, self.generator_net, self.stores.get("generator"), "generator")
        discriminator = None
        if self.discriminator_net is not None:
            discriminator = attach(graph, self.discriminator_net, self.stores["discriminator"], "discriminator")
        learner = None
        if self.state is not None:
            learner = self.state.with_stores(self.stores).attach(graph)
        return generator, discriminator, learner

    def _trainable(self, generator, discriminator, learner) -> dict[str, dict[str, Node]]:
        nodes = {}
        if "generator" in self.stores and "generator" not in self.frozen:
            nodes["generator"] = generator.params
        if discriminator is not None:
            nodes["discriminator"] = discriminator.params
        if learner is not None:
            nodes["learner"] = learner.phi.params
            if isinstance(learner.alpha, dict):
                nodes["alpha"] = learner.alpha
        return nodes

    def instance_batch(self, rng: np.random.Generator) -> tuple:
        x, labels = sample_instance_batch(self.datasets.concept, self.config.train.instance_batch, rng)
        targets = np.eye(len(self.concept_classes))[np.searchsorted(self.concept_classes, labels)]
        return x, targets

    def step(self, iteration: int, tasks: Sequence[Episode], instances: Optional[tuple]) -> LogRow:
        """Build J for the given batches and apply one Adam update."""
        graph = Graph()
        generator, discriminator, learner = self._attach(graph)
        if learner is None:
            disc = discrimination_loss(generator, discriminator, *instances)
            terms = LossTerms(disc, None, disc)
        else:
            terms = combined_loss(generator, discriminator, learner, tasks, instances, self.lam)

        trainable = self._trainable(generator, discriminator, learner)
        wrt = [(store, name, node) for store, params in trainable.items() for name, node in params.items()]
        grads = graph.grad(terms.total, [node for _, _, node in wrt])
        logged = [t for t in (terms.meta, terms.disc) if t is not None]
        try:
            values = graph.eval([terms.total] + logged + grads)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {iteration}: {exc}") from exc
        if not np.isfinite(values[0]):
            raise TrainingError(f"non-finite loss at iteration {iteration}")

        row = LogRow(iteration)
        scalars = iter(values[1:1 + len(logged)])
        if terms.meta is not None:
            row.meta_loss = float(next(scalars))
        if terms.disc is not None:
            row.disc_loss = float(next(scalars))

        by_store: dict[str, dict[str, np.ndarray]] = {}
        for (store, name, _), value in zip(wrt, values[1 + len(logged):]):
            by_store.setdefault(store, {})[name] = value
        for store, store_grads in by_store.items():
            self.stores[store] = adam_update(self.adam[store], self.stores[store], store_grads, self.config.train.outer_lr)
        return row

    def loss_value(self, tasks: Sequence[Episode], instances: Optional[tuple]) -> float:
        """J at the current parameters without updating them."""
        graph = Graph()
        generator, discriminator, learner = self._attach(graph)
        if learner is None:
            total = discrimination_loss(generator, discriminator, *instances)
        else:
            total = combined_loss(generator, discriminator, learner, tasks, instances, self.lam).total
        (value,) = graph.eval([total])
        return float(value)

    @property
    def learner_state(self) -> Optional[MetaLearnerState]:
        return None if self.state is None else self.state.with_stores(self.stores)


def pretrain(config: ExperimentConfig, datasets: Datasets, seed: int, iterations: Optional[int] = None) -> dict:
    """Decaf stage: train D∘G on the concept dataset alone."""
    train = replace(config.train, mode="pretrain-only", lam=None, merge_concept_classes=False)
    trainer = Trainer(replace(config, train=train), datasets, seed)
    rng = stream(seed, "train", "instances")
    total = iterations if iterations is not None else config.train.pretrain_iterations
    for it in range(1, total + 1):
        row = trainer.step(it, (), trainer.instance_batch(rng))
        if it % config.train.log_every == 0 or it == total:
            logger.debug(f"pretrain {it}/{total}: disc_loss={row.disc_loss:.4f}")
    return dict(trainer.stores)


def run_training(config: ExperimentConfig, datasets: Datasets, seed: Optional[int] = None) -> TrainingResult:
    """Train per ``config.train.mode``; returns final stores and the log."""
    from .evaluation import FewShotModel, concept_accuracy, meta_test

    seed = config.seed if seed is None else seed
    train = config.train
    episodes = config.episodes
    trainer = Trainer(config, datasets, seed)
    logger.info(
        f"Training mode={train.mode} learner={train.meta_learner} lambda={trainer.lam} "
        f"iterations={train.iterations}"
    )

    task_rng = stream(seed, "train", "tasks")
    instance_rng = stream(seed, "train", "instances")
    n_tasks = train.tasks_per_batch(episodes.k_shot)
    uses_instances = trainer.discriminator_net is not None

    train_dist = val_dist = None
    if train.mode != "pretrain-only":
        extra = datasets.concept if train.merge_concept_classes else None
        train_dist = datasets.distribution("train", episodes.n_way, episodes.k_shot, episodes.train_queries, task_rng, extra)
        if datasets.split.val and train.val_every > 0:
            val_dist = datasets.distribution("val", episodes.n_way, episodes.k_shot, episodes.val_queries)

    result = TrainingResult(stores={})
    for it in range(1, train.iterations + 1):
        tasks = [train_dist.sample() for _ in range(n_tasks)] if train_dist is not None else ()
        instances = trainer.instance_batch(instance_rng) if uses_instances else None
        try:
            row = trainer.step(it, tasks, instances)
        except TrainingError:
            raise
        except DeepMetaError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc

        if val_dist is not None and (it % train.val_every == 0 or it == train.iterations):
            model = FewShotModel(trainer.generator_net, trainer.stores.get("generator"), trainer.learner_state)
            report = meta_test(model, val_dist, train.val_tasks, seed, role="val", workers=config.workers)
            row.val_acc = report.mean_accuracy
            if result.best_val_acc is None or report.mean_accuracy > result.best_val_acc:
                result.best_val_acc = report.mean_accuracy
                result.best_iter = it
                result.best_stores = dict(trainer.stores)
            logger.info(f"iter {it}: val_acc={report.mean_accuracy:.4f} ± {report.ci95_halfwidth:.4f}")
        if it % train.log_every == 0 or it == train.iterations:
            parts = [f"{k}={getattr(row, k):.4f}" for k in ("meta_loss", "disc_loss") if getattr(row, k) is not None]
            logger.info(f"iter {it}/{train.iterations}: " + " ".join(parts))
        result.log.append(row)

    result.stores = dict(trainer.stores)
    if uses_instances and datasets.concept_holdout is not None:
        result.concept_acc = concept_accuracy(
            trainer.generator_net,
            trainer.stores["generator"],
            trainer.discriminator_net,
            trainer.stores["discriminator"],
            datasets.concept_holdout,
            trainer.concept_classes,
        )
        logger.info(f"Concept recognition accuracy on held-out instances: {result.concept_acc:.4f}")
    if result.best_iter is not None:
        logger.info(f"Best validation accuracy {result.best_val_acc:.4f} at iteration {result.best_iter}")
    return result


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_training_log(rows: Sequence[LogRow], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "iter": row.iter,
                    "meta_loss": _fmt(row.meta_loss),
                    "disc_loss": _fmt(row.disc_loss),
                    "val_acc": _fmt(row.val_acc),
                }
            )
    logger.info(f"Wrote training log to {path}")
