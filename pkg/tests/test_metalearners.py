"""Tests for Matching Nets, MAML and Meta-SGD."""

import numpy as np
import pytest

from deepmeta.autodiff import Graph
from deepmeta.config import ExperimentConfig, LearnerConfig
from deepmeta.episodes import Episode
from deepmeta.errors import UnsupportedOperationError
from deepmeta.gradcheck import SECOND_ORDER_TOLERANCE, check_graph, second_order_case
from deepmeta.metalearners import (
    MetaLearnerState,
    build_state,
    episode_accuracy,
    inner_adapt,
    matching_predict,
    meta_loss,
)
from deepmeta.models import Dense, Network, ParamStore, attach, build_learner, init_params, learner_forward


def _identity_embedding(dim):
    network = Network((Dense("dense0", dim, dim, relu=False),), (dim,))
    params = ParamStore({"dense0.weight": np.eye(dim), "dense0.bias": np.zeros(dim)})
    return MetaLearnerState("matching", network, params, 0.0)


def _episode(support_x, support_y, query_x, query_y, n_way):
    support_y, query_y = np.asarray(support_y), np.asarray(query_y)
    return Episode(
        support_x=np.asarray(support_x, dtype=float),
        support_y=support_y,
        query_x=np.asarray(query_x, dtype=float),
        query_y=query_y,
        way_map=tuple(range(n_way)),
        support_index=np.arange(len(support_y)),
        query_index=len(support_y) + np.arange(len(query_y)),
    )


def _predict(state, support_x, support_y, query_x, n_way):
    graph = Graph()
    generator = attach(graph, None, None, "generator")
    learner = state.attach(graph)
    probs = matching_predict(
        generator,
        learner,
        graph.constant(np.asarray(support_x, dtype=float)),
        graph.constant(np.eye(n_way)[support_y]),
        graph.constant(np.asarray(query_x, dtype=float)),
    )
    return graph.eval([probs])[0]


def test_matching_hand_case():
    """Test softmax over cosine 1 and 0."""
    probs = _predict(_identity_embedding(2), [[1, 0], [0, 1]], [0, 1], [[1, 0]], 2)
    e = np.e
    np.testing.assert_allclose(probs, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    np.testing.assert_allclose(probs, [[0.73106, 0.26894]], atol=1e-5)


def test_matching_symmetry_and_single_class():
    probs = _predict(_identity_embedding(2), [[1, 0], [0, 1]], [0, 1], [[1, 1]], 2)
    np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-12)
    probs = _predict(_identity_embedding(2), [[1, 0], [0, 1], [1, 1]], [1, 1, 1], [[0.3, -2.0]], 2)
    np.testing.assert_allclose(probs, [[0.0, 1.0]], atol=1e-12)


def _brute_force_matching(support, support_y, query, n_way):
    out = np.zeros((len(query), n_way))
    for qi, q in enumerate(query):
        sims = []
        for s in support:
            nq, ns = np.linalg.norm(q), np.linalg.norm(s)
            sims.append(0.0 if nq == 0 or ns == 0 else float(np.dot(q, s) / (nq * ns)))
        weights = np.exp(np.array(sims) - max(sims))
        weights /= weights.sum()
        for w, label in zip(weights, support_y):
            out[qi, label] += w
    return out


def test_matching_matches_brute_force():
    """Test attention against an explicit loop on random episodes."""
    rng = np.random.default_rng(0)
    state = _identity_embedding(6)
    for _ in range(1000):
        n_way = int(rng.integers(2, 6))
        k_shot = int(rng.integers(1, 25 // n_way + 1))
        support_y = np.repeat(np.arange(n_way), k_shot)
        support = rng.normal(size=(support_y.size, 6))
        query = rng.normal(size=(3, 6))
        probs = _predict(state, support, support_y, query, n_way)
        np.testing.assert_allclose(probs, _brute_force_matching(support, support_y, query, n_way), atol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)


def test_matching_permutation_invariant():
    rng = np.random.default_rng(1)
    state = _identity_embedding(4)
    support_y = np.repeat(np.arange(3), 4)
    support = rng.normal(size=(12, 4))
    query = rng.normal(size=(5, 4))
    order = rng.permutation(12)
    a = _predict(state, support, support_y, query, 3)
    b = _predict(state, support[order], support_y[order], query, 3)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_matching_has_no_inner_loop():
    graph = Graph()
    learner = _identity_embedding(2).attach(graph)
    x = graph.constant(np.ones((2, 2)))
    with pytest.raises(UnsupportedOperationError):
        inner_adapt(attach(graph, None, None, "generator"), learner, x, graph.constant(np.eye(2)))


def _classifier_state(kind, alpha, dim=3, n_way=2, seed=0):
    network = build_learner(LearnerConfig(hidden=[4]), kind, dim, n_way)
    params = init_params(network, seed)
    if kind == "metasgd":
        alpha = params.full_like(alpha)
    return MetaLearnerState(kind, network, params, alpha)


@pytest.mark.parametrize("kind", ["maml", "metasgd"])
def test_zero_rate_is_identity(kind):
    """Test alpha = 0 leaves phi bit-exactly unchanged."""
    state = _classifier_state(kind, 0.0)
    graph = Graph()
    learner = state.attach(graph)
    rng = np.random.default_rng(2)
    adapted = inner_adapt(
        attach(graph, None, None, "generator"),
        learner,
        graph.constant(rng.normal(size=(4, 3))),
        graph.constant(np.eye(2)[[0, 1, 0, 1]]),
    )
    values = graph.eval([adapted[name] for name in state.params.names()])
    for name, value in zip(state.params.names(), values):
        assert np.array_equal(value, state.params[name])


def test_inner_step_rules_by_hand():
    """Test the MAML scalar step and the Meta-SGD elementwise step."""
    graph = Graph()
    phi = graph.parameter("phi", 1.0)
    (g,) = graph.grad(phi * phi, [phi])
    (value,) = graph.eval([phi - graph.scale(g, 0.01)])
    assert value == pytest.approx(0.98, abs=1e-15)

    phi = graph.parameter("phi_vec", [1.0, 2.0])
    alpha = graph.parameter("alpha", [0.1, 0.5])
    grad = graph.constant([2.0, 2.0])
    (value,) = graph.eval([phi - graph.mul(alpha, grad)])
    np.testing.assert_allclose(value, [0.8, 1.0], atol=1e-15)


def test_uniform_logits_loss_is_log_n():
    """Test a zero-parameter learner has loss ln N and alpha=0 keeps it."""
    state = _classifier_state("maml", 0.0, n_way=5)
    state = MetaLearnerState("maml", state.network, state.params.full_like(0.0), 0.0)
    rng = np.random.default_rng(3)
    episode = _episode(rng.normal(size=(5, 3)), range(5), rng.normal(size=(10, 3)), np.repeat(range(5), 2), 5)
    graph = Graph()
    result = meta_loss(attach(graph, None, None, "generator"), state.attach(graph), episode)
    (loss,) = graph.eval([result.loss])
    assert loss == pytest.approx(np.log(5.0), abs=1e-12)


def test_zero_rate_maml_equals_unadapted_loss():
    state = _classifier_state("maml", 0.0)
    rng = np.random.default_rng(4)
    episode = _episode(rng.normal(size=(4, 3)), [0, 0, 1, 1], rng.normal(size=(6, 3)), [0, 0, 0, 1, 1, 1], 2)
    graph = Graph()
    result = meta_loss(attach(graph, None, None, "generator"), state.attach(graph), episode)
    learner_nodes = state.params.attach(graph, "plain/")
    logits = learner_forward(state.network, learner_nodes, graph.constant(episode.query_x))
    plain = graph.mean(graph.cross_entropy(logits, graph.constant(np.eye(2)[episode.query_y])))
    a, b = graph.eval([result.loss, plain])
    assert a == b


def test_matching_one_way_episode():
    state = _identity_embedding(3)
    rng = np.random.default_rng(5)
    episode = _episode(rng.normal(size=(2, 3)), [0, 0], rng.normal(size=(4, 3)), [0, 0, 0, 0], 1)
    graph = Graph()
    result = meta_loss(attach(graph, None, None, "generator"), state.attach(graph), episode)
    loss, scores = graph.eval([result.loss, result.scores])
    assert abs(loss) < 1e-11
    assert result.accuracy(scores) == 1.0


def test_accuracy_ties_go_to_lowest_way():
    scores = np.array([[0.5, 0.5], [0.2, 0.8], [1.0, 1.0]])
    assert episode_accuracy(scores, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_build_state_from_config():
    config = ExperimentConfig()
    state = build_state(config, 32, seed=0)
    assert state.kind == "metasgd"
    assert state.alpha.congruent(state.params)
    assert all(np.all(v == 0.01) for _, v in state.alpha.items())
    config.train.meta_learner = "maml"
    assert build_state(config, 32, seed=0).alpha == 0.01


def test_metasgd_requires_congruent_rates():
    state = _classifier_state("maml", 0.1)
    with pytest.raises(ValueError):
        MetaLearnerState("metasgd", state.network, state.params, 0.1)


@pytest.mark.parametrize("kind", ["maml", "metasgd"])
@pytest.mark.parametrize("steps", [1, 3])
def test_outer_gradient_is_second_order(kind, steps):
    """Test d meta_loss / d(theta_G, phi, alpha) against finite differences."""
    graph, loss, wrt = second_order_case(kind, seed=1, steps=steps)
    assert sum(node.size for node in wrt) <= 200
    assert check_graph(graph, loss, wrt) < SECOND_ORDER_TOLERANCE


def _adapted_values(state, support_x, support_y):
    graph = Graph()
    adapted = inner_adapt(
        attach(graph, None, None, "generator"),
        state.attach(graph),
        graph.constant(support_x),
        graph.constant(np.eye(2)[support_y]),
    )
    names = state.params.names()
    return ParamStore(dict(zip(names, graph.eval([adapted[name] for name in names]))))


@pytest.mark.parametrize("kind", ["maml", "metasgd"])
def test_multi_step_adaptation_repeats_the_step(kind):
    """Test steps=2 equals two single steps, each from the previous parameters."""
    state = _classifier_state(kind, 0.3)
    rng = np.random.default_rng(6)
    support_x = rng.normal(size=(4, 3))
    support_y = np.array([0, 1, 0, 1])
    once = _adapted_values(state, support_x, support_y)
    twice = _adapted_values(MetaLearnerState(kind, state.network, once, state.alpha), support_x, support_y)
    both = _adapted_values(MetaLearnerState(kind, state.network, state.params, state.alpha, steps=2), support_x, support_y)
    assert not once.equals(state.params)
    for name in state.params.names():
        np.testing.assert_allclose(both[name], twice[name], atol=1e-12)
