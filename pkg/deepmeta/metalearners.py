"""Meta-learners over the shared concept generator.

Each learner turns an :class:`~deepmeta.episodes.Episode` into a
differentiable query loss:

- ``matching``: attention over the support set with cosine similarity of
  embedded concepts, no inner loop;
- ``maml``: one or more gradient steps from a learned initialization with a
  fixed scalar rate;
- ``metasgd``: like MAML but the rate is a learned tensor per parameter.

Inner steps are built as graph nodes, so the outer gradient differentiates
through them exactly (second order).
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Graph, Node
from .config import ExperimentConfig
from .episodes import Episode
from .errors import DatasetError, UnsupportedOperationError
from .models import Attached, Network, ParamStore, attach, build_learner, init_params, learner_forward

MATCHING_EPS = 1e-12


@dataclass(frozen=True)
class MetaLearnerState:
    """Learner network, its parameters and the inner-loop rate."""

    kind: str
    network: Network
    params: ParamStore
    alpha: Union[float, ParamStore] = 0.01
    steps: int = 1

    def __post_init__(self):
        if self.kind not in ("matching", "maml", "metasgd"):
            raise ValueError(f"unknown meta-learner '{self.kind}'")
        if self.steps < 1:
            raise ValueError(f"inner steps must be at least 1, got {self.steps}")
        if self.kind == "metasgd":
            if not isinstance(self.alpha, ParamStore) or not self.alpha.congruent(self.params):
                raise ValueError("metasgd needs a rate tensor for every learner tensor")
        elif self.kind == "maml" and float(self.alpha) < 0:
            raise ValueError(f"maml rate must be non-negative, got {self.alpha}")

    def stores(self) -> dict[str, ParamStore]:
        """Trainable stores by checkpoint name."""
        if self.kind == "metasgd":
            return {"learner": self.params, "alpha": self.alpha}
        return {"learner": self.params}

    def with_stores(self, stores: dict) -> "MetaLearnerState":
        return MetaLearnerState(
            self.kind,
            self.network,
            stores.get("learner", self.params),
            stores.get("alpha", self.alpha) if self.kind == "metasgd" else self.alpha,
            self.steps,
        )

    def attach(self, graph: Graph, trainable: bool = True) -> "BoundLearner":
        phi = attach(graph, self.network, self.params, "learner", trainable)
        alpha = self.alpha
        if self.kind == "metasgd":
            alpha = self.alpha.attach(graph, "alpha/", trainable)
        return BoundLearner(self.kind, phi, alpha, self.steps)


@dataclass(frozen=True)
class BoundLearner:
    kind: str
    phi: Attached
    alpha: Union[float, dict]
    steps: int

    @property
    def graph(self) -> Graph:
        return next(iter(self.phi.params.values())).graph

    def nodes(self) -> list[Node]:
        nodes = self.phi.nodes()
        if isinstance(self.alpha, dict):
            nodes += list(self.alpha.values())
        return nodes


def build_state(config: ExperimentConfig, feature_dim: int, seed: int) -> MetaLearnerState:
    """Fresh learner state for ``config.train.meta_learner``."""
    kind = config.train.meta_learner
    network = build_learner(config.learner, kind, feature_dim, config.episodes.n_way)
    params = init_params(network, seed)
    if kind == "metasgd":
        alpha = params.full_like(config.train.alpha_init)
    else:
        alpha = config.train.inner_lr
    return MetaLearnerState(kind, network, params, alpha, config.train.inner_steps)


def _onehot(graph: Graph, labels: np.ndarray, n_way: int) -> Node:
    return graph.constant(np.eye(n_way)[labels])


def matching_predict(
    generator: Attached, learner: BoundLearner, support_x: Node, support_y: Node, query_x: Node
) -> Node:
    """Class distribution [queries, n_way] as cosine attention over the support."""
    if support_x.shape[0] == 0:
        raise DatasetError("matching needs a non-empty support set")
    graph = support_x.graph
    embed = learner.phi
    support = learner_forward(embed.network, embed.params, generator(support_x))
    query = learner_forward(embed.network, embed.params, generator(query_x))
    attention = graph.softmax(graph.cosine(query, support), axis=1)
    return graph.matmul(attention, support_y)


def inner_adapt(generator: Attached, learner: BoundLearner, support_x: Node, support_y: Node) -> dict:
    """Adapted learner parameters phi' as nodes (still differentiable)."""
    if learner.kind == "matching":
        raise UnsupportedOperationError("matching networks have no inner adaptation")
    if support_x.shape[0] == 0:
        raise DatasetError("inner adaptation needs a non-empty support set")
    graph = support_x.graph
    network = learner.phi.network
    features = generator(support_x)
    phi = dict(learner.phi.params)
    names = list(phi)
    for _ in range(learner.steps):
        logits = learner_forward(network, phi, features)
        loss = graph.mean(graph.cross_entropy(logits, support_y))
        grads = graph.grad(loss, [phi[n] for n in names])
        if learner.kind == "maml":
            steps = [graph.scale(g, float(learner.alpha)) for g in grads]
        else:
            steps = [graph.mul(learner.alpha[n], g) for n, g in zip(names, grads)]
        phi = {n: graph.sub(phi[n], s) for n, s in zip(names, steps)}
    return phi


@dataclass(frozen=True)
class EpisodeLoss:
    loss: Node
    # probabilities (matching) or logits (maml/metasgd), [queries, n_way]
    scores: Node
    labels: np.ndarray

    def accuracy(self, scores: np.ndarray) -> float:
        return episode_accuracy(scores, self.labels)


def episode_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def meta_loss(generator: Attached, learner: BoundLearner, episode: Episode) -> EpisodeLoss:
    """Mean query loss of one episode after the learner has seen its support."""
    graph = learner.graph
    n_way = episode.n_way
    support_x = graph.constant(episode.support_x)
    support_y = _onehot(graph, episode.support_y, n_way)
    query_x = graph.constant(episode.query_x)
    query_y = _onehot(graph, episode.query_y, n_way)

    if learner.kind == "matching":
        probs = matching_predict(generator, learner, support_x, support_y, query_x)
        picked = graph.sum(graph.mul(probs, query_y), axis=1)
        nll = graph.neg(graph.log(graph.add(picked, graph.full(picked.shape, MATCHING_EPS))))
        return EpisodeLoss(graph.mean(nll), probs, episode.query_y)

    phi = inner_adapt(generator, learner, support_x, support_y)
    logits = learner_forward(learner.phi.network, phi, generator(query_x))
    loss = graph.mean(graph.cross_entropy(logits, query_y))
    return EpisodeLoss(loss, logits, episode.query_y)


def predict(
    generator_network: Optional[Network],
    generator_params: Optional[ParamStore],
    state: MetaLearnerState,
    episode: Episode,
) -> tuple[float, float]:
    """(query loss, query accuracy) of one episode on a fresh graph."""
    graph = Graph()
    generator = attach(graph, generator_network, generator_params, "generator", trainable=False)
    learner = state.attach(graph, trainable=False)
    result = meta_loss(generator, learner, episode)
    loss, scores = graph.eval([result.loss, result.scores])
    return float(loss), result.accuracy(scores)
