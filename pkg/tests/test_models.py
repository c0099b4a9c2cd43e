"""Tests for networks and parameter stores."""

import numpy as np
import pytest

from deepmeta.autodiff import Graph
from deepmeta.config import GeneratorConfig, LearnerConfig
from deepmeta.errors import ShapeError
from deepmeta.models import (
    Dense,
    Network,
    ParamStore,
    attach,
    build_discriminator,
    build_generator,
    build_learner,
    discriminator_forward,
    generator_forward,
    init_params,
    learner_forward,
)


def _run(network, params, x):
    graph = Graph()
    nodes = params.attach(graph)
    (out,) = graph.eval([generator_forward(network, nodes, graph.constant(x))])
    return out


def test_generator_layouts():
    """Test default mlp and small-conv generator layouts."""
    mlp = build_generator(GeneratorConfig(), 32)
    assert [layer.name for layer in mlp.layers] == ["dense0", "dense1"]
    assert mlp.input_dim == 32
    assert mlp.output_dim == 32

    conv = build_generator(GeneratorConfig(kind="small-conv"), 32)
    assert [layer.name for layer in conv.layers] == ["conv0", "dense0"]
    # [1, 4, 8] -> 3x3 valid conv with 8 channels -> [8, 2, 6]
    assert conv.layers[-1].fan_in == 8 * 2 * 6


def test_small_conv_flattened_width():
    """Test the dense layer after the convolutions sees C*H*W features."""
    config = GeneratorConfig(kind="small-conv", image_shape=[1, 6, 8], channels=[4, 8], kernel_size=3, feature_dim=5)
    network = build_generator(config, 48)
    assert network.layers[-1].fan_in == 8 * 2 * 4
    x = np.random.default_rng(0).normal(size=(3, 48))
    out = _run(network, init_params(network, 0), x)
    assert out.shape == (3, 5)


def test_image_shape_must_match_input():
    with pytest.raises(ShapeError):
        build_generator(GeneratorConfig(kind="small-conv", image_shape=[1, 4, 4]), 32)


def test_init_statistics():
    """Test He-normal weights and zero biases."""
    network = Network((Dense("dense0", 64, 10000 // 64 + 1, relu=True),), (64,))
    params = init_params(network, 7)
    weights = params["dense0.weight"]
    assert weights.size >= 10000
    assert np.var(weights) == pytest.approx(2.0 / 64, rel=0.2)
    np.testing.assert_array_equal(params["dense0.bias"], 0.0)


def test_init_is_seeded():
    network = build_generator(GeneratorConfig(), 8)
    assert init_params(network, 3).equals(init_params(network, 3))
    assert not init_params(network, 3).equals(init_params(network, 4))


def test_zero_generator_gives_zero_features():
    network = build_generator(GeneratorConfig(), 6)
    params = init_params(network, 0).full_like(0.0)
    out = _run(network, params, np.random.default_rng(1).normal(size=(4, 6)))
    np.testing.assert_array_equal(out, 0.0)


def test_identity_generator():
    """Test a one-layer identity mlp returns its input."""
    network = build_generator(GeneratorConfig(hidden=[], feature_dim=3, final_relu=False), 3)
    params = ParamStore({"dense0.weight": np.eye(3), "dense0.bias": np.zeros(3)})
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(_run(network, params, x), x)


def test_two_layer_forward_by_hand():
    """Test a 2-layer relu forward on a 2-dim input."""
    network = build_generator(GeneratorConfig(hidden=[2], feature_dim=1, final_relu=False), 2)
    params = ParamStore(
        {
            "dense0.weight": np.array([[1.0, -1.0], [2.0, 1.0]]),
            "dense0.bias": np.array([0.0, 0.5]),
            "dense1.weight": np.array([[1.0], [3.0]]),
            "dense1.bias": np.array([-1.0]),
        }
    )
    # h = relu([1 + 2*2, -1 + 2 + 0.5]) = [5, 1.5]; y = 5 + 4.5 - 1
    out = _run(network, params, np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(out, [[8.5]])


def test_discriminator_forward():
    """Test zero weights are uniform and the affine map by hand."""
    network = build_discriminator(3, 2)
    graph = Graph()
    params = ParamStore(
        {"dense0.weight": np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]]), "dense0.bias": np.array([0.5, 0.0])}
    )
    features = graph.constant([[1.0, 2.0, 3.0]])
    logits = discriminator_forward(network, params.attach(graph), features)
    zero = discriminator_forward(network, params.full_like(0.0).attach(graph), features)
    out, probs = graph.eval([logits, graph.softmax(zero, axis=1)])
    np.testing.assert_allclose(out, [[7.5, -1.0]])
    np.testing.assert_allclose(probs, [[0.5, 0.5]])


def test_learner_outputs():
    """Test classifier logits and matching embedding widths."""
    classifier = build_learner(LearnerConfig(), "metasgd", 32, 5)
    assert classifier.output_dim == 5
    assert not classifier.layers[-1].relu
    embedding = build_learner(LearnerConfig(embedding_dim=7), "matching", 32, 5)
    assert embedding.output_dim == 7

    graph = Graph()
    params = init_params(classifier, 0).full_like(0.0)
    out = learner_forward(classifier, params.attach(graph), graph.constant(np.ones((2, 32))))
    np.testing.assert_array_equal(graph.eval([out])[0], np.zeros((2, 5)))


def test_forward_rejects_wrong_width():
    network = build_generator(GeneratorConfig(), 8)
    graph = Graph()
    with pytest.raises(ShapeError):
        generator_forward(network, init_params(network, 0).attach(graph), graph.constant(np.zeros((2, 9))))


def test_forward_is_pure():
    network = build_generator(GeneratorConfig(kind="small-conv"), 32)
    params = init_params(network, 1)
    x = np.random.default_rng(2).normal(size=(5, 32))
    np.testing.assert_array_equal(_run(network, params, x), _run(network, params, x))


def test_param_store_flatten_roundtrip():
    params = init_params(build_generator(GeneratorConfig(hidden=[3], feature_dim=2), 4), 0)
    vector = np.arange(params.num_parameters, dtype=float)
    assert np.array_equal(params.unflatten(vector).flatten(), vector)
    assert params.unflatten(params.flatten()).equals(params)
    with pytest.raises(ShapeError):
        params.unflatten(np.zeros(params.num_parameters + 1))


def test_param_store_is_immutable():
    params = ParamStore({"w": np.ones(2)})
    with pytest.raises(ValueError):
        params["w"][0] = 5.0
    updated = params.replace({"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], 1.0)
    np.testing.assert_array_equal(updated["w"], 0.0)


def test_attach_identity_without_network():
    graph = Graph()
    bound = attach(graph, None, None, "generator")
    x = graph.constant(np.ones((2, 3)))
    assert bound(x) is x
    assert bound.nodes() == []
