"""Networks of the concept generator, concept discriminator and learners.

A :class:`Network` is a static layout (layer names and sizes); its weights
live in a :class:`ParamStore`. Forward functions take the store's tensors
as graph nodes, so the same code serves plain evaluation, training and
differentiation through adapted parameters.

Parameter names follow ``<layer>.<tensor>``, e.g. ``dense0.weight`` or
``conv1.kernel``; checkpoints qualify them with the store name.
"""

from dataclasses import dataclass
from math import prod, sqrt
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .autodiff import Graph, Node, conv2d
from .config import GeneratorConfig, LearnerConfig
from .errors import ShapeError


class ParamStore:
    """Ordered, immutable mapping of parameter names to float64 tensors."""

    def __init__(self, entries: Mapping[str, np.ndarray], rng_seed: Optional[int] = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in entries.items():
            array = np.array(value, dtype=np.float64)
            array.setflags(write=False)
            self._entries[name] = array
        self.rng_seed = rng_seed

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.num_parameters} parameters)"

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self._entries.values())

    def shapes(self) -> dict[str, tuple]:
        return {name: value.shape for name, value in self._entries.items()}

    def congruent(self, other: "ParamStore") -> bool:
        """Same names in the same order with the same shapes."""
        return list(self.shapes().items()) == list(other.shapes().items())

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact equality of names, shapes and values."""
        return self.congruent(other) and all(
            np.array_equal(a, other[name]) for name, a in self.items()
        )

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, vector: np.ndarray) -> "ParamStore":
        """A store shaped like this one holding the values of ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_parameters,):
            raise ShapeError("unflatten", [(self.num_parameters,), vector.shape])
        entries, offset = {}, 0
        for name, value in self._entries.items():
            entries[name] = vector[offset:offset + value.size].reshape(value.shape)
            offset += value.size
        return ParamStore(entries, self.rng_seed)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        entries = dict(self._entries)
        for name, value in updates.items():
            if name not in entries:
                raise KeyError(f"unknown parameter '{name}'")
            if np.shape(value) != entries[name].shape:
                raise ShapeError("replace", [entries[name].shape, np.shape(value)], name)
            entries[name] = value
        return ParamStore(entries, self.rng_seed)

    def full_like(self, fill: float) -> "ParamStore":
        return ParamStore({n: np.full(v.shape, fill) for n, v in self.items()}, self.rng_seed)

    def attach(self, graph: Graph, prefix: str = "", trainable: bool = True) -> dict[str, Node]:
        """Bind every tensor to a parameter leaf of ``graph``."""
        return {
            name: graph.parameter(prefix + name, value, trainable=trainable)
            for name, value in self.items()
        }


@dataclass(frozen=True)
class Dense:
    name: str
    fan_in: int
    fan_out: int
    relu: bool


@dataclass(frozen=True)
class Conv:
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int
    relu: bool = True


Layer = Union[Dense, Conv]


@dataclass(frozen=True)
class Network:
    """Layer layout; ``input_shape`` is per example (image shape for conv nets)."""

    layers: tuple
    input_shape: tuple

    @property
    def input_dim(self) -> int:
        return prod(self.input_shape)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out


def _dense_stack(widths: Sequence[int], fan_in: int, final_relu: bool, start: int = 0) -> list[Dense]:
    layers = []
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        layers.append(Dense(f"dense{start + i}", fan_in, width, final_relu if last else True))
        fan_in = width
    return layers


def build_generator(config: GeneratorConfig, input_dim: int) -> Network:
    if config.kind == "mlp":
        widths = list(config.hidden) + [config.feature_dim]
        return Network(tuple(_dense_stack(widths, input_dim, config.final_relu)), (input_dim,))

    image = tuple(config.image_shape)
    if prod(image) != input_dim:
        raise ShapeError("generator", [image, (input_dim,)], "image_shape must match input_dim")
    layers: list[Layer] = []
    channels, height, width = image
    for i, out_channels in enumerate(config.channels):
        layers.append(Conv(f"conv{i}", channels, out_channels, config.kernel_size))
        channels = out_channels
        height -= config.kernel_size - 1
        width -= config.kernel_size - 1
    flat = channels * height * width
    layers.extend(_dense_stack([config.feature_dim], flat, config.final_relu))
    return Network(tuple(layers), image)


def build_discriminator(feature_dim: int, num_classes: int) -> Network:
    """One fully connected layer producing concept-class logits."""
    return Network((Dense("dense0", feature_dim, num_classes, relu=False),), (feature_dim,))


def build_learner(config: LearnerConfig, kind: str, feature_dim: int, n_way: int) -> Network:
    """Classifier for maml/metasgd (n_way logits) or embedding g for matching."""
    if kind == "matching":
        widths = list(config.embedding_hidden) + [config.embedding_dim]
        final_relu = config.embedding_relu
    else:
        widths = list(config.hidden) + [n_way]
        final_relu = False
    return Network(tuple(_dense_stack(widths, feature_dim, final_relu)), (feature_dim,))


def init_params(network: Network, seed: int) -> ParamStore:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    entries = {}
    for layer in network.layers:
        if isinstance(layer, Conv):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            entries[f"{layer.name}.kernel"] = rng.normal(0.0, sqrt(2.0 / fan_in), size=shape)
            entries[f"{layer.name}.bias"] = np.zeros(layer.out_channels)
        else:
            shape = (layer.fan_in, layer.fan_out)
            entries[f"{layer.name}.weight"] = rng.normal(0.0, sqrt(2.0 / layer.fan_in), size=shape)
            entries[f"{layer.name}.bias"] = np.zeros(layer.fan_out)
    store = ParamStore(entries, rng_seed=seed)
    logger.debug(f"Initialized {store} with seed {seed}")
    return store


def network_forward(network: Network, params: Mapping[str, Node], batch: Node, role: str) -> Node:
    graph = batch.graph
    if batch.ndim != 2 or batch.shape[1] != network.input_dim:
        raise ShapeError(role, [batch.shape, (network.input_dim,)], "expected [batch, input_dim]")
    rows = batch.shape[0]
    x = batch
    if isinstance(network.layers[0], Conv):
        x = graph.reshape(x, (rows,) + tuple(network.input_shape))
    for layer in network.layers:
        if isinstance(layer, Conv):
            x = conv2d(x, params[f"{layer.name}.kernel"])
            bias = graph.reshape(params[f"{layer.name}.bias"], (1, layer.out_channels, 1, 1))
            x = graph.add(x, graph.broadcast(bias, x.shape))
        else:
            if x.ndim != 2:
                x = graph.reshape(x, (rows, x.size // rows))
            x = graph.affine(x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        if layer.relu:
            x = graph.relu(x)
    return x


def generator_forward(network: Network, params: Mapping[str, Node], batch: Node) -> Node:
    """Concept features [batch, feature_dim] of raw instances."""
    return network_forward(network, params, batch, "generator")


def discriminator_forward(network: Network, params: Mapping[str, Node], features: Node) -> Node:
    """Concept-class logits [batch, num_concept_classes]."""
    return network_forward(network, params, features, "discriminator")


def learner_forward(network: Network, params: Mapping[str, Node], features: Node) -> Node:
    """Task logits (maml/metasgd) or embeddings (matching)."""
    return network_forward(network, params, features, "learner")


@dataclass(frozen=True)
class Attached:
    """A network whose parameters are leaves of one graph; ``network=None`` is the identity."""

    network: Optional[Network]
    params: dict
    role: str

    def __call__(self, x: Node) -> Node:
        if self.network is None:
            return x
        return network_forward(self.network, self.params, x, self.role)

    def nodes(self) -> list[Node]:
        return list(self.params.values())


def attach(
    graph: Graph,
    network: Optional[Network],
    params: Optional[ParamStore],
    role: str,
    trainable: bool = True,
) -> Attached:
    if network is None:
        return Attached(None, {}, role)
    return Attached(network, params.attach(graph, f"{role}/", trainable), role)
