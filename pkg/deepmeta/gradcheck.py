"""Finite-difference checks of every backward rule.

Each case builds a small graph, reduces its output to a scalar with a
fixed random weighting and compares :meth:`Graph.grad` against central
differences for every input leaf. Errors are relative with a unit floor,
``|a - n| / max(1, |a|, |n|)``, so gradients near zero are compared
absolutely.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from loguru import logger

from .autodiff import Graph, Node, conv2d, finite_diff
from .config import GeneratorConfig, LearnerConfig
from .episodes import Episode
from .metalearners import MetaLearnerState, meta_loss
from .models import (
    attach,
    build_discriminator,
    build_generator,
    build_learner,
    discriminator_forward,
    init_params,
)

FIRST_ORDER_TOLERANCE = 1e-6
SECOND_ORDER_TOLERANCE = 1e-4
STEP = 1e-5
# Smallest scale a gradient tensor is measured against.
RELATIVE_FLOOR = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference over the largest magnitude in either tensor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), RELATIVE_FLOOR)
    return float(np.max(np.abs(analytic - numeric))) / scale


def scalarize(output: Node, rng: np.random.Generator) -> Node:
    """sum(output * R) for a fixed random R; scalars pass through."""
    graph = output.graph
    if output.shape == ():
        return output
    weights = graph.constant(rng.normal(size=output.shape))
    return graph.sum(graph.mul(output, weights))


def check_graph(graph: Graph, loss: Node, wrt: list[Node], h: float = STEP) -> float:
    """Largest relative error of grad(loss) over all ``wrt`` leaves."""
    grads = graph.eval(graph.grad(loss, wrt))
    return max(relative_error(g, finite_diff(graph, loss, w, h)) for g, w in zip(grads, wrt))


def _away_from_zero(rng, shape, margin=0.2):
    values = rng.uniform(margin, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


# Each case: (graph, rng) -> (output node, leaves to differentiate)
Case = Callable[[Graph, np.random.Generator], tuple]


def _binary(op: str) -> Case:
    def build(graph, rng):
        a = graph.parameter("a", rng.normal(size=(3, 4)))
        b = graph.parameter("b", rng.normal(size=(3, 4)))
        return getattr(graph, op)(a, b), [a, b]

    return build


def _matmul(transpose_a: bool, transpose_b: bool) -> Case:
    def build(graph, rng):
        a = graph.parameter("a", rng.normal(size=(4, 3) if transpose_a else (3, 4)))
        b = graph.parameter("b", rng.normal(size=(2, 4) if transpose_b else (4, 2)))
        return graph.matmul(a, b, transpose_a, transpose_b), [a, b]

    return build


def _unary(op: str, positive: bool = False, **attrs) -> Case:
    def build(graph, rng):
        value = rng.uniform(0.5, 2.0, size=(3, 4)) if positive else _away_from_zero(rng, (3, 4))
        x = graph.parameter("x", value)
        return getattr(graph, op)(x, **attrs), [x]

    return build


def _broadcast(graph, rng):
    x = graph.parameter("x", rng.normal(size=(3, 1)))
    return graph.broadcast(x, (2, 3, 4)), [x]


def _reshape(graph, rng):
    x = graph.parameter("x", rng.normal(size=(3, 4)))
    return graph.reshape(x, (2, 6)), [x]


def _concat(graph, rng):
    a = graph.parameter("a", rng.normal(size=(2, 3, 2)))
    b = graph.parameter("b", rng.normal(size=(2, 1, 2)))
    return graph.concat([a, b], axis=1), [a, b]


def _cross_entropy(graph, rng):
    logits = graph.parameter("logits", rng.normal(size=(4, 3)))
    targets = graph.parameter("targets", rng.dirichlet(np.ones(3), size=4))
    return graph.cross_entropy(logits, targets), [logits, targets]


def _cosine(graph, rng):
    a = graph.parameter("a", rng.normal(size=(3, 5)))
    b = graph.parameter("b", rng.normal(size=(4, 5)))
    return graph.cosine(a, b), [a, b]


def _im2col(graph, rng):
    x = graph.parameter("x", rng.normal(size=(2, 2, 4, 5)))
    return graph.im2col(x, 3, 2), [x]


def _conv2d(graph, rng):
    x = graph.parameter("x", rng.normal(size=(2, 2, 5, 4)))
    k = graph.parameter("k", rng.normal(size=(3, 2, 3, 3)))
    return conv2d(x, k), [x, k]


PRIMITIVE_CASES: dict[str, Case] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "matmul": _matmul(False, False),
    "matmul_transpose_a": _matmul(True, False),
    "matmul_transpose_b": _matmul(False, True),
    "sum": _unary("sum"),
    "sum_axis": _unary("sum", axis=1),
    "mean": _unary("mean"),
    "mean_axis": _unary("mean", axis=0),
    "broadcast": _broadcast,
    "reshape": _reshape,
    "concat": _concat,
    "relu": _unary("relu"),
    "exp": _unary("exp"),
    "log": _unary("log", positive=True),
    "sqrt": _unary("sqrt", positive=True),
    "softmax": _unary("softmax", axis=1),
    "cross_entropy": _cross_entropy,
    "cosine": _cosine,
    "im2col": _im2col,
    "conv2d": _conv2d,
}


def _model_case(role: str) -> Case:
    def build(graph, rng):
        if role == "generator_mlp":
            network = build_generator(GeneratorConfig(hidden=[6], feature_dim=4), 5)
        elif role == "generator_conv":
            config = GeneratorConfig(kind="small-conv", feature_dim=3, image_shape=[1, 4, 5], channels=[2], kernel_size=3)
            network = build_generator(config, 20)
        elif role == "discriminator":
            network = build_discriminator(4, 3)
        else:
            network = build_learner(LearnerConfig(hidden=[5]), "maml", 4, 3)
        params = init_params(network, int(rng.integers(2**31)))
        bound = attach(graph, network, params, role)
        x = graph.constant(rng.normal(size=(3, network.input_dim)))
        return bound(x), bound.nodes()

    return build


MODEL_CASES: dict[str, Case] = {
    name: _model_case(name) for name in ("generator_mlp", "generator_conv", "discriminator", "learner")
}


def _tiny_episode(rng: np.random.Generator, n_way: int = 2, k_shot: int = 2, n_query: int = 2, dim: int = 4) -> Episode:
    centers = rng.normal(size=(n_way, dim)) * 2.0
    support_y = np.repeat(np.arange(n_way), k_shot)
    query_y = np.repeat(np.arange(n_way), n_query)
    return Episode(
        support_x=centers[support_y] + 0.3 * rng.normal(size=(support_y.size, dim)),
        support_y=support_y,
        query_x=centers[query_y] + 0.3 * rng.normal(size=(query_y.size, dim)),
        query_y=query_y,
        way_map=tuple(range(n_way)),
        support_index=np.arange(support_y.size),
        query_index=support_y.size + np.arange(query_y.size),
    )


def second_order_case(kind: str, seed: int = 0, steps: int = 1) -> tuple:
    """meta_loss of a tiny generator + learner; wrt theta_G, phi and (metasgd) alpha."""
    rng = np.random.default_rng(seed)
    episode = _tiny_episode(rng)
    gen_net = build_generator(GeneratorConfig(hidden=[5], feature_dim=4, final_relu=False), 4)
    learner_net = build_learner(LearnerConfig(hidden=[4]), kind, 4, episode.n_way)
    learner_params = init_params(learner_net, seed + 1)
    alpha = learner_params.full_like(0.3) if kind == "metasgd" else 0.3
    state = MetaLearnerState(kind, learner_net, learner_params, alpha, steps=steps)

    graph = Graph()
    generator = attach(graph, gen_net, init_params(gen_net, seed + 2), "generator")
    learner = state.attach(graph)
    loss = meta_loss(generator, learner, episode).loss
    return graph, loss, generator.nodes() + learner.nodes()


def run_suite(seed: int = 0, second_order: bool = True) -> list[CheckResult]:
    results = []
    for group, cases in (("primitive", PRIMITIVE_CASES), ("model", MODEL_CASES)):
        for name, build in cases.items():
            rng = np.random.default_rng(seed)
            graph = Graph()
            output, wrt = build(graph, rng)
            error = check_graph(graph, scalarize(output, rng), wrt)
            results.append(CheckResult(f"{group}/{name}", error, FIRST_ORDER_TOLERANCE))
            logger.debug(f"{group}/{name}: max relative error {error:.3e}")
    if second_order:
        for kind in ("maml", "metasgd"):
            graph, loss, wrt = second_order_case(kind, seed)
            error = check_graph(graph, loss, wrt)
            results.append(CheckResult(f"second-order/{kind}", error, SECOND_ORDER_TOLERANCE))
            logger.debug(f"second-order/{kind}: max relative error {error:.3e}")
    return results
