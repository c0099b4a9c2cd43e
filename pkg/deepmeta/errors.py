"""Exception hierarchy for deepmeta."""

from typing import Optional, Sequence


class DeepMetaError(Exception):
    """Base class for every error raised by deepmeta."""


class GraphError(DeepMetaError):
    """Misuse of a computation graph (foreign nodes, non-scalar loss)."""


class ShapeError(DeepMetaError):
    """Operand shapes are incompatible with a primitive's shape rule."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DomainError(DeepMetaError):
    """Input outside a primitive's domain (log/sqrt of non-positive values)."""

    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op} (node {node_id}): input must be strictly positive")


class NonFiniteError(DeepMetaError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op} (node {node_id}) produced a non-finite value")


class UnboundLeafError(DeepMetaError):
    """A parameter leaf was evaluated without a bound tensor."""

    def __init__(self, node_id: int, name: Optional[str] = None):
        self.node_id = node_id
        self.name = name
        label = f"'{name}' " if name else ""
        super().__init__(f"parameter {label}(node {node_id}) has no binding")


class UnsupportedOperationError(DeepMetaError):
    """Operation not defined for the selected meta-learner."""


class ConfigError(DeepMetaError):
    """Invalid configuration value, unknown key or parse failure."""

    def __init__(
        self,
        message: str,
        key: Optional[str] = None,
        line: Optional[int] = None,
        suggestion: Optional[str] = None,
    ):
        self.key = key
        self.line = line
        self.suggestion = suggestion
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if key is not None:
            parts.append(f"'{key}'")
        prefix = ", ".join(parts)
        text = f"{prefix}: {message}" if prefix else message
        if suggestion:
            text += f" (did you mean '{suggestion}'?)"
        super().__init__(text)


class DatasetError(DeepMetaError):
    """Invalid dataset contents, dimensions or meta-split."""


class EpisodeError(DatasetError):
    """A class cannot supply the examples an episode needs."""

    def __init__(self, class_id: int, available: int, required: int):
        self.class_id = class_id
        self.available = available
        self.required = required
        super().__init__(
            f"class {class_id} has {available} examples, episode needs {required}"
        )


class FormatError(DeepMetaError):
    """Malformed DMLD/DMLC file or split manifest."""


class TrainingError(DeepMetaError):
    """Training contract violation or diverged optimization."""
