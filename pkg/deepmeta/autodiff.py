"""Graph-based reverse-mode differentiation over dense float64 tensors.

A :class:`Graph` is an append-only list of :class:`Node` objects. Building a
node only infers its shape; values are produced by :meth:`Graph.eval` from
the bindings of the leaves (constants and parameters).

Every backward rule is written with the same primitives the forward pass
uses, so :meth:`Graph.grad` returns ordinary nodes that can be evaluated or
differentiated again. This is what lets the meta-learners differentiate
through their own inner gradient steps.

Shapes are strict: there is no implicit broadcasting, ``broadcast`` has to
be requested explicitly.
"""

from abc import ABC, abstractmethod
from functools import lru_cache
from math import prod
from typing import Iterable, Optional, Sequence

import numpy as np
from loguru import logger

from .errors import (
    DomainError,
    GraphError,
    NonFiniteError,
    ShapeError,
    UnboundLeafError,
)

Shape = tuple

LEAVES = ("constant", "parameter")


class Node:
    """One vertex of a computation graph."""

    __slots__ = ("graph", "id", "op", "inputs", "shape", "attrs", "name")

    def __init__(self, graph, node_id, op, inputs, shape, attrs, name=None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.attrs = attrs
        self.name = name

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return prod(self.shape)

    def __add__(self, other):
        return self.graph.add(self, self.graph._lift(other, self.shape))

    def __radd__(self, other):
        return self.graph.add(self.graph._lift(other, self.shape), self)

    def __sub__(self, other):
        return self.graph.sub(self, self.graph._lift(other, self.shape))

    def __rsub__(self, other):
        return self.graph.sub(self.graph._lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.neg(self)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Node({self.id}, {self.op}{label}, shape={self.shape})"


def _keep_shape(shape: Shape, axis: Optional[int]) -> Shape:
    if axis is None:
        return tuple(1 for _ in shape)
    return tuple(1 if i == axis else d for i, d in enumerate(shape))


def _reduced_shape(shape: Shape, axis: Optional[int]) -> Shape:
    if axis is None:
        return ()
    return tuple(d for i, d in enumerate(shape) if i != axis)


def _normalize_axis(op: str, shape: Shape, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    rank = len(shape)
    if not -rank <= axis < rank:
        raise ShapeError(op, [shape], f"axis {axis} out of range")
    return axis % rank


@lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Gather index [P, K] into a flattened [C*H*W] sample."""
    oh, ow = h - kh + 1, w - kw + 1
    ci, di, dj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = (oi.reshape(-1, 1) + di.reshape(1, -1)) * w
    cols = oj.reshape(-1, 1) + dj.reshape(1, -1)
    index = ci.reshape(1, -1) * h * w + rows + cols
    index.setflags(write=False)
    return index


@lru_cache(maxsize=64)
def _im2col_matrix(c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """0/1 matrix M with im2col(x).ravel() == M @ x.ravel() for one sample."""
    index = _im2col_index(c, h, w, kh, kw).ravel()
    matrix = np.zeros((index.size, c * h * w))
    matrix[np.arange(index.size), index] = 1.0
    matrix.setflags(write=False)
    return matrix


class Primitive(ABC):
    """Shape rule, forward kernel and backward rule of one graph operation."""

    differentiable = True

    @abstractmethod
    def infer_shape(self, shapes: Sequence[Shape], attrs: dict) -> Shape:
        """Output shape for the given input shapes, or raise ShapeError."""

    @abstractmethod
    def forward(self, values: Sequence[np.ndarray], node: Node) -> np.ndarray:
        """Compute the node value from its input values."""

    def backward(self, graph: "Graph", node: Node, grad: Node, wanted: Sequence[bool]):
        """Return one adjoint node (or None) per input, built from primitives."""
        return [None for _ in node.inputs]


class Leaf(Primitive):
    def infer_shape(self, shapes, attrs):
        return tuple(attrs["shape"])

    def forward(self, values, node):
        raise GraphError(f"leaf {node!r} has no forward kernel")


class ElementwiseBinary(Primitive):
    name = ""

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if a != b:
            raise ShapeError(self.name, [a, b])
        return a


class Add(ElementwiseBinary):
    name = "add"

    def forward(self, values, node):
        return values[0] + values[1]

    def backward(self, graph, node, grad, wanted):
        return [grad, grad]


class Sub(ElementwiseBinary):
    name = "sub"

    def forward(self, values, node):
        return values[0] - values[1]

    def backward(self, graph, node, grad, wanted):
        return [grad, graph.neg(grad) if wanted[1] else None]


class Mul(ElementwiseBinary):
    name = "mul"

    def forward(self, values, node):
        return values[0] * values[1]

    def backward(self, graph, node, grad, wanted):
        a, b = graph.inputs_of(node)
        return [
            graph.mul(grad, b) if wanted[0] else None,
            graph.mul(grad, a) if wanted[1] else None,
        ]


class MatMul(Primitive):
    """2-D product op(A) @ op(B) where op is an optional transpose."""

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if len(a) != 2 or len(b) != 2:
            raise ShapeError("matmul", [a, b], "operands must be 2-D")
        a = a[::-1] if attrs["transpose_a"] else a
        b = b[::-1] if attrs["transpose_b"] else b
        if a[1] != b[0]:
            raise ShapeError("matmul", [a, b], "inner dimensions differ")
        return (a[0], b[1])

    def forward(self, values, node):
        a, b = values
        if node.attrs["transpose_a"]:
            a = a.T
        if node.attrs["transpose_b"]:
            b = b.T
        return a @ b

    def backward(self, graph, node, grad, wanted):
        a, b = graph.inputs_of(node)
        ta, tb = node.attrs["transpose_a"], node.attrs["transpose_b"]
        ga = gb = None
        if wanted[0]:
            if ta:
                ga = graph.matmul(b, grad, transpose_a=tb, transpose_b=True)
            else:
                ga = graph.matmul(grad, b, transpose_b=not tb)
        if wanted[1]:
            if tb:
                gb = graph.matmul(grad, a, transpose_a=True, transpose_b=ta)
            else:
                gb = graph.matmul(a, grad, transpose_a=not ta)
        return [ga, gb]


class Sum(Primitive):
    def infer_shape(self, shapes, attrs):
        return _reduced_shape(shapes[0], attrs["axis"])

    def forward(self, values, node):
        return np.asarray(np.sum(values[0], axis=node.attrs["axis"]))

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        kept = graph.reshape(grad, _keep_shape(x.shape, node.attrs["axis"]))
        return [graph.broadcast(kept, x.shape)]


class Mean(Sum):
    def forward(self, values, node):
        return np.asarray(np.mean(values[0], axis=node.attrs["axis"]))

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        axis = node.attrs["axis"]
        count = x.size if axis is None else x.shape[axis]
        (spread,) = super().backward(graph, node, grad, wanted)
        return [graph.scale(spread, 1.0 / count)]


class Broadcast(Primitive):
    """Right-aligned broadcast: each source dim equals the target dim or is 1."""

    def infer_shape(self, shapes, attrs):
        src, dst = shapes[0], tuple(attrs["shape"])
        lead = len(dst) - len(src)
        if lead < 0 or any(
            s != 1 and s != d for s, d in zip(src, dst[lead:])
        ):
            raise ShapeError("broadcast", [src, dst])
        return dst

    def forward(self, values, node):
        return np.array(np.broadcast_to(values[0], node.shape))

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        lead = node.ndim - x.ndim
        axes = list(range(lead)) + [
            lead + i
            for i, d in enumerate(x.shape)
            if d == 1 and node.shape[lead + i] != 1
        ]
        out = grad
        for axis in sorted(axes, reverse=True):
            out = graph.sum(out, axis=axis)
        return [graph.reshape(out, x.shape)]


class Reshape(Primitive):
    def infer_shape(self, shapes, attrs):
        src, dst = shapes[0], tuple(attrs["shape"])
        if prod(src) != prod(dst):
            raise ShapeError("reshape", [src, dst], "element counts differ")
        return dst

    def forward(self, values, node):
        return values[0].reshape(node.shape)

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        return [graph.reshape(grad, x.shape)]


class Concat(Primitive):
    def infer_shape(self, shapes, attrs):
        axis = attrs["axis"]
        first = shapes[0]
        for other in shapes[1:]:
            if len(other) != len(first) or any(
                a != b for i, (a, b) in enumerate(zip(first, other)) if i != axis
            ):
                raise ShapeError("concat", [first, other], f"axis {axis}")
        total = sum(s[axis] for s in shapes)
        return tuple(total if i == axis else d for i, d in enumerate(first))

    def forward(self, values, node):
        return np.concatenate(values, axis=node.attrs["axis"])

    def backward(self, graph, node, grad, wanted):
        # Slice i of the row-major [P, D*Q] view is a column selection.
        axis = node.attrs["axis"]
        outer = prod(node.shape[:axis])
        inner = prod(node.shape[axis + 1:])
        width = node.shape[axis] * inner
        flat = graph.reshape(grad, (outer, width))
        grads, offset = [], 0
        for x, want in zip(graph.inputs_of(node), wanted):
            span = x.shape[axis] * inner
            if want:
                select = np.zeros((width, span))
                select[offset + np.arange(span), np.arange(span)] = 1.0
                part = graph.matmul(flat, graph.constant(select))
                grads.append(graph.reshape(part, x.shape))
            else:
                grads.append(None)
            offset += span
        return grads


class ElementwiseUnary(Primitive):
    def infer_shape(self, shapes, attrs):
        return shapes[0]


class Relu(ElementwiseUnary):
    def forward(self, values, node):
        return np.maximum(values[0], 0.0)

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        return [graph.mul(grad, graph.step(x))]


class Exp(ElementwiseUnary):
    def forward(self, values, node):
        return np.exp(values[0])

    def backward(self, graph, node, grad, wanted):
        return [graph.mul(grad, node)]


class Log(ElementwiseUnary):
    def forward(self, values, node):
        if np.any(values[0] <= 0.0):
            raise DomainError("log", node.id)
        return np.log(values[0])

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        return [graph.mul(grad, graph.reciprocal(x))]


class Sqrt(ElementwiseUnary):
    def forward(self, values, node):
        if np.any(values[0] <= 0.0):
            raise DomainError("sqrt", node.id)
        return np.sqrt(values[0])

    def backward(self, graph, node, grad, wanted):
        return [graph.mul(grad, graph.scale(graph.reciprocal(node), 0.5))]


class Softmax(Primitive):
    def infer_shape(self, shapes, attrs):
        return shapes[0]

    def forward(self, values, node):
        axis = node.attrs["axis"]
        shifted = values[0] - np.max(values[0], axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    def backward(self, graph, node, grad, wanted):
        axis = node.attrs["axis"]
        inner = graph.sum(graph.mul(grad, node), axis=axis)
        inner = graph.broadcast(graph.reshape(inner, _keep_shape(node.shape, axis)), node.shape)
        return [graph.mul(node, graph.sub(grad, inner))]


class CrossEntropy(Primitive):
    """Per-row sum_c t[c] * (logsumexp(z) - z[c]) for logits z and targets t."""

    def infer_shape(self, shapes, attrs):
        z, t = shapes
        if len(z) != 2 or z != t:
            raise ShapeError("cross_entropy", [z, t], "expected equal [batch, classes]")
        return (z[0],)

    def forward(self, values, node):
        z, t = values
        peak = np.max(z, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(z - peak), axis=1, keepdims=True)) + peak
        return np.sum(t * (lse - z), axis=1)

    def backward(self, graph, node, grad, wanted):
        z, t = graph.inputs_of(node)
        rows, classes = z.shape
        g = graph.broadcast(graph.reshape(grad, (rows, 1)), z.shape)
        probs = graph.softmax(z, axis=1)
        gz = gt = None
        if wanted[0]:
            mass = graph.broadcast(graph.reshape(graph.sum(t, axis=1), (rows, 1)), z.shape)
            gz = graph.mul(graph.sub(graph.mul(probs, mass), t), g)
        if wanted[1]:
            gt = graph.mul(graph.neg(graph.log(probs)), g)
        return [gz, gt]


class Cosine(Primitive):
    """Pairwise row cosine [n, d] x [m, d] -> [n, m]; zero rows give 0."""

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[1]:
            raise ShapeError("cosine", [a, b], "expected [n, d] and [m, d]")
        return (a[0], b[0])

    def forward(self, values, node):
        a, b = (v / np.where(n > 0.0, n, 1.0) for v, n in (
            (values[0], np.linalg.norm(values[0], axis=1, keepdims=True)),
            (values[1], np.linalg.norm(values[1], axis=1, keepdims=True)),
        ))
        return np.clip(a @ b.T, -1.0, 1.0)

    def backward(self, graph, node, grad, wanted):
        a, b = graph.inputs_of(node)
        composite = graph.matmul(
            graph.normalize_rows(a), graph.normalize_rows(b), transpose_b=True
        )
        targets = [x for x, want in zip((a, b), wanted) if want]
        adjoints = graph._backprop({composite.id: grad}, targets, stop_at={a.id, b.id})
        if a.id == b.id:
            # both uses already accumulated into one adjoint
            return [adjoints.get(a.id), None]
        return [adjoints.get(x.id) if want else None for x, want in zip((a, b), wanted)]


class Im2Col(Primitive):
    """[B, C, H, W] -> [B*OH*OW, C*kh*kw]; stride 1, no padding."""

    def infer_shape(self, shapes, attrs):
        (x,) = shapes
        kh, kw = attrs["kh"], attrs["kw"]
        if len(x) != 4:
            raise ShapeError("im2col", [x], "input must be [batch, c, h, w]")
        if kh < 1 or kw < 1 or kh > x[2] or kw > x[3]:
            raise ShapeError("im2col", [x, (kh, kw)], "kernel larger than input")
        b, c, h, w = x
        return (b * (h - kh + 1) * (w - kw + 1), c * kh * kw)

    def forward(self, values, node):
        b, c, h, w = values[0].shape
        index = _im2col_index(c, h, w, node.attrs["kh"], node.attrs["kw"])
        return values[0].reshape(b, c * h * w)[:, index].reshape(node.shape)

    def backward(self, graph, node, grad, wanted):
        (x,) = graph.inputs_of(node)
        b, c, h, w = x.shape
        gather = graph.constant(_im2col_matrix(c, h, w, node.attrs["kh"], node.attrs["kw"]))
        flat = graph.reshape(grad, (b, node.size // b))
        return [graph.reshape(graph.matmul(flat, gather), x.shape)]


class Argmax(Primitive):
    differentiable = False

    def infer_shape(self, shapes, attrs):
        return _reduced_shape(shapes[0], attrs["axis"])

    def forward(self, values, node):
        return np.asarray(np.argmax(values[0], axis=node.attrs["axis"]), dtype=np.float64)


PRIMITIVES = {
    "constant": Leaf(),
    "parameter": Leaf(),
    "add": Add(),
    "sub": Sub(),
    "mul": Mul(),
    "matmul": MatMul(),
    "sum": Sum(),
    "mean": Mean(),
    "broadcast": Broadcast(),
    "reshape": Reshape(),
    "concat": Concat(),
    "relu": Relu(),
    "exp": Exp(),
    "log": Log(),
    "sqrt": Sqrt(),
    "softmax": Softmax(),
    "cross_entropy": CrossEntropy(),
    "cosine": Cosine(),
    "im2col": Im2Col(),
    "argmax": Argmax(),
}


def _frozen(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


class Graph:
    """Append-only computation graph with leaf bindings."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()
        self.bindings: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # -- construction ------------------------------------------------------

    def apply(self, op: str, inputs: Sequence[Node], name: Optional[str] = None, **attrs) -> Node:
        """Append a primitive node after checking its shape rule."""
        if op not in PRIMITIVES:
            raise GraphError(f"unknown primitive '{op}'")
        for node in inputs:
            if not isinstance(node, Node) or node.graph is not self:
                raise GraphError(f"{op}: input {node!r} does not belong to this graph")
        shape = tuple(PRIMITIVES[op].infer_shape([n.shape for n in inputs], attrs))
        node = Node(self, len(self.nodes), op, tuple(n.id for n in inputs), shape, attrs, name)
        self.nodes.append(node)
        return node

    def inputs_of(self, node: Node) -> list[Node]:
        return [self.nodes[i] for i in node.inputs]

    def constant(self, value, name: Optional[str] = None) -> Node:
        value = _frozen(value)
        node = self.apply("constant", [], name=name, shape=value.shape)
        self.bindings[node.id] = value
        return node

    def parameter(
        self,
        name: str,
        value=None,
        shape: Optional[Shape] = None,
        trainable: bool = True,
    ) -> Node:
        """Create a parameter leaf; bind it now when ``value`` is given."""
        if value is None and shape is None:
            raise GraphError(f"parameter '{name}' needs a value or a shape")
        if shape is None:
            shape = np.shape(value)
        node = self.apply("parameter", [], name=name, shape=tuple(shape))
        if trainable:
            self.parameters.add(node.id)
        if value is not None:
            self.bind(node, value)
        return node

    def bind(self, node: Node, value) -> None:
        if node.op not in LEAVES:
            raise GraphError(f"cannot bind non-leaf {node!r}")
        value = _frozen(value)
        if value.shape != node.shape:
            raise ShapeError("bind", [node.shape, value.shape], f"node {node.id}")
        self.bindings[node.id] = value

    def _lift(self, value, shape: Shape) -> Node:
        if isinstance(value, Node):
            return value
        return self.full(shape, float(value))

    # -- primitive wrappers ------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", [a, b])

    def sub(self, a: Node, b: Node) -> Node:
        return self.apply("sub", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self.apply("mul", [a, b])

    def matmul(self, a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
        return self.apply("matmul", [a, b], transpose_a=transpose_a, transpose_b=transpose_b)

    def sum(self, x: Node, axis: Optional[int] = None) -> Node:
        return self.apply("sum", [x], axis=_normalize_axis("sum", x.shape, axis))

    def mean(self, x: Node, axis: Optional[int] = None) -> Node:
        return self.apply("mean", [x], axis=_normalize_axis("mean", x.shape, axis))

    def broadcast(self, x: Node, shape: Shape) -> Node:
        if tuple(shape) == x.shape:
            return x
        return self.apply("broadcast", [x], shape=tuple(shape))

    def reshape(self, x: Node, shape: Shape) -> Node:
        if tuple(shape) == x.shape:
            return x
        return self.apply("reshape", [x], shape=tuple(shape))

    def concat(self, xs: Sequence[Node], axis: int = 0) -> Node:
        if not xs:
            raise GraphError("concat needs at least one input")
        return self.apply("concat", list(xs), axis=_normalize_axis("concat", xs[0].shape, axis))

    def relu(self, x: Node) -> Node:
        return self.apply("relu", [x])

    def exp(self, x: Node) -> Node:
        return self.apply("exp", [x])

    def log(self, x: Node) -> Node:
        return self.apply("log", [x])

    def sqrt(self, x: Node) -> Node:
        return self.apply("sqrt", [x])

    def softmax(self, x: Node, axis: int = -1) -> Node:
        return self.apply("softmax", [x], axis=_normalize_axis("softmax", x.shape, axis))

    def cross_entropy(self, logits: Node, targets: Node) -> Node:
        return self.apply("cross_entropy", [logits, targets])

    def cosine(self, a: Node, b: Node) -> Node:
        if a.ndim == 1:
            a = self.reshape(a, (1, a.shape[0]))
        if b.ndim == 1:
            b = self.reshape(b, (1, b.shape[0]))
        return self.apply("cosine", [a, b])

    def im2col(self, x: Node, kh: int, kw: int) -> Node:
        return self.apply("im2col", [x], kh=int(kh), kw=int(kw))

    def argmax(self, x: Node, axis: int = -1) -> Node:
        return self.apply("argmax", [x], axis=_normalize_axis("argmax", x.shape, axis))

    # -- compositions ------------------------------------------------------

    def full(self, shape: Shape, fill: float) -> Node:
        return self.constant(np.full(tuple(shape), fill, dtype=np.float64))

    def zeros(self, shape: Shape) -> Node:
        return self.full(shape, 0.0)

    def neg(self, x: Node) -> Node:
        return self.sub(self.zeros(x.shape), x)

    def scale(self, x: Node, factor: float) -> Node:
        return self.mul(x, self.full(x.shape, factor))

    def reciprocal(self, x: Node) -> Node:
        return self.exp(self.neg(self.log(x)))

    def step(self, x: Node) -> Node:
        """1 where x > 0, else 0 (argmax over [0, x]; ties resolve to 0)."""
        column = x.shape + (1,)
        pair = self.concat([self.zeros(column), self.reshape(x, column)], axis=x.ndim)
        return self.argmax(pair, axis=x.ndim)

    def normalize_rows(self, x: Node) -> Node:
        """Rows scaled to unit norm; zero rows stay zero."""
        squares = self.sum(self.mul(x, x), axis=1)
        mask = self.step(squares)
        shifted = self.add(squares, self.sub(self.full(squares.shape, 1.0), mask))
        inverse = self.mul(mask, self.exp(self.scale(self.log(shifted), -0.5)))
        inverse = self.broadcast(self.reshape(inverse, (x.shape[0], 1)), x.shape)
        return self.mul(x, inverse)

    def affine(self, x: Node, weight: Node, bias: Node) -> Node:
        out = self.matmul(x, weight)
        return self.add(out, self.broadcast(self.reshape(bias, (1, bias.shape[0])), out.shape))

    # -- evaluation and differentiation ------------------------------------

    def _ancestors(self, roots: Iterable[int], stop_at: frozenset = frozenset()) -> set[int]:
        seen: set[int] = set()
        stack = list(roots)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            if nid not in stop_at:
                stack.extend(self.nodes[nid].inputs)
        return seen

    def eval(self, outputs: Sequence[Node]) -> list[np.ndarray]:
        """Evaluate ``outputs``; visits ancestors in topological (id) order."""
        outputs = list(outputs)
        for node in outputs:
            if node.graph is not self:
                raise GraphError(f"{node!r} does not belong to this graph")
        values: dict[int, np.ndarray] = {}
        for nid in sorted(self._ancestors(n.id for n in outputs)):
            node = self.nodes[nid]
            if node.op in LEAVES:
                if nid not in self.bindings:
                    raise UnboundLeafError(nid, node.name)
                values[nid] = self.bindings[nid]
                continue
            with np.errstate(all="ignore"):
                value = PRIMITIVES[node.op].forward([values[i] for i in node.inputs], node)
            value = np.asarray(value, dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(node.op, nid)
            value.setflags(write=False)
            values[nid] = value
        return [values[n.id] for n in outputs]

    def _backprop(
        self,
        seeds: dict[int, Node],
        wrt: Sequence[Node],
        stop_at: frozenset = frozenset(),
    ) -> dict[int, Node]:
        """Accumulate adjoints from ``seeds`` back to the ``wrt`` nodes."""
        targets = {w.id for w in wrt}
        order = sorted(self._ancestors(seeds, frozenset(stop_at)))
        live: set[int] = set()
        for nid in order:
            node = self.nodes[nid]
            if nid in targets:
                live.add(nid)
            elif PRIMITIVES[node.op].differentiable and any(i in live for i in node.inputs):
                live.add(nid)

        adjoints = {nid: seed for nid, seed in seeds.items() if nid in live}
        for nid in reversed(order):
            grad = adjoints.get(nid)
            node = self.nodes[nid]
            if grad is None or node.op in LEAVES or nid in stop_at:
                continue
            wanted = [i in live for i in node.inputs]
            if not any(wanted):
                continue
            parts = PRIMITIVES[node.op].backward(self, node, grad, wanted)
            for i, want, part in zip(node.inputs, wanted, parts):
                if not want or part is None:
                    continue
                adjoints[i] = part if i not in adjoints else self.add(adjoints[i], part)
        return {t: adjoints[t] for t in targets if t in adjoints}

    def grad(self, loss: Node, wrt: Sequence[Node]) -> list[Node]:
        """Gradient nodes d(loss)/d(w) for each w; zeros off the loss path."""
        if loss.graph is not self:
            raise GraphError(f"{loss!r} does not belong to this graph")
        if loss.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        wrt = list(wrt)
        for w in wrt:
            if w.graph is not self:
                raise GraphError(f"{w!r} does not belong to this graph")
        adjoints = self._backprop({loss.id: self.constant(1.0)}, wrt)
        logger.trace(f"grad: {len(wrt)} targets, graph now {len(self.nodes)} nodes")
        return [
            adjoints[w.id] if w.id in adjoints else self.zeros(w.shape) for w in wrt
        ]


def primitive(op_tag: str, inputs: Sequence[Node], **attrs) -> Node:
    """Apply primitive ``op_tag`` to nodes of one graph."""
    if not inputs:
        raise GraphError(f"{op_tag}: leaves are created with Graph.constant/parameter")
    return inputs[0].graph.apply(op_tag, list(inputs), **attrs)


def evaluate(graph: Graph, outputs: Sequence[Node]) -> list[np.ndarray]:
    return graph.eval(outputs)


def grad(graph: Graph, loss: Node, wrt: Sequence[Node]) -> list[Node]:
    return graph.grad(loss, wrt)


def finite_diff(graph: Graph, loss: Node, wrt: Node, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d(loss)/d(wrt) for a bound leaf."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    if loss.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if wrt.op not in LEAVES or wrt.id not in graph.bindings:
        raise GraphError(f"finite differences need a bound leaf, got {wrt!r}")
    base = graph.bindings[wrt.id]
    estimate = np.zeros(base.shape)
    try:
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] + h
            graph.bind(wrt, shifted)
            (upper,) = graph.eval([loss])
            shifted.flat[i] = base.flat[i] - h
            graph.bind(wrt, shifted)
            (lower,) = graph.eval([loss])
            estimate.flat[i] = (float(upper) - float(lower)) / (2.0 * h)
    finally:
        graph.bind(wrt, base)
    return estimate


def conv2d(input: Node, kernel: Node) -> Node:
    """Valid, stride-1 cross-correlation [B,C,H,W] * [OC,C,KH,KW] -> [B,OC,OH,OW]."""
    graph = input.graph
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d", [input.shape, kernel.shape], "expected rank-4 operands")
    batch, channels, height, width = input.shape
    out_channels, kernel_channels, kh, kw = kernel.shape
    if kernel_channels != channels:
        raise ShapeError("conv2d", [input.shape, kernel.shape], "channel mismatch")
    if kh > height or kw > width:
        raise ShapeError("conv2d", [input.shape, kernel.shape], "kernel larger than input")
    oh, ow = height - kh + 1, width - kw + 1

    columns = graph.im2col(input, kh, kw)
    weights = graph.reshape(kernel, (out_channels, channels * kh * kw))
    out = graph.matmul(columns, weights, transpose_b=True)
    # [B, P, OC] -> [B, OC, P]: a 1x1 im2col moves the channel axis last.
    out = graph.im2col(graph.reshape(out, (batch, oh * ow, out_channels, 1)), 1, 1)
    return graph.reshape(out, (batch, out_channels, oh, ow))
