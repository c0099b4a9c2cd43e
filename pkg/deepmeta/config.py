"""Configuration management for deepmeta.

Experiments are described by a TOML or YAML file with a top-level ``seed``
and ``workers`` plus the sections ``[data]``, ``[episodes]``,
``[generator]``, ``[learner]``, ``[train]`` and ``[output]``. Every key has
a default; unknown keys are rejected so a typo never silently falls back to
a default.
"""

import difflib
import re
from math import prod
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, get_type_hints

import yaml
from loguru import logger

from .errors import ConfigError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


MODES = ("deml", "vanilla", "deep-vanilla", "decaf-frozen", "decaf-finetune", "pretrain-only")
META_LEARNERS = ("matching", "maml", "metasgd")
GENERATOR_KINDS = ("mlp", "small-conv")

# Modes whose objective has no concept-discrimination term.
META_ONLY_MODES = ("vanilla", "deep-vanilla", "decaf-frozen", "decaf-finetune")

# Config keys that are not valid Python identifiers.
ALIASES = {"lambda": "lam"}
KEY_NAMES = {attr: key for key, attr in ALIASES.items()}


@dataclass
class DataConfig:
    """Datasets: DMLD files when paths are set, otherwise synthetic."""

    name: str = "synthetic"
    meta_dataset: Optional[Path] = None
    concept_dataset: Optional[Path] = None
    split_manifest: Optional[Path] = None

    # Synthetic benchmark
    train_classes: int = 20
    val_classes: int = 5
    test_classes: int = 10
    per_class: int = 40
    concept_classes: int = 200
    concept_per_class: int = 30
    input_dim: int = 32
    concept_dim: int = 8
    nuisance_dim: int = 16
    noise: float = 0.1
    independent_rendering: bool = False

    # Fraction of each concept class held out for recognition accuracy
    concept_holdout: float = 0.2


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    train_queries: int = 5
    val_queries: int = 15
    test_queries: int = 15


@dataclass
class GeneratorConfig:
    """Concept generator G: ``mlp`` or ``small-conv``."""

    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [64])
    feature_dim: int = 32
    final_relu: bool = True

    # small-conv only: per-example image shape (product must equal input_dim)
    image_shape: list = field(default_factory=lambda: [1, 4, 8])
    channels: list = field(default_factory=lambda: [8])
    kernel_size: int = 3


@dataclass
class LearnerConfig:
    """Per-task learner networks of the meta-learners."""

    # MAML / Meta-SGD classifier: hidden widths, output size is n_way
    hidden: list = field(default_factory=lambda: [32, 16])
    # Matching Nets embedding g
    embedding_hidden: list = field(default_factory=lambda: [32])
    embedding_dim: int = 16
    embedding_relu: bool = False


@dataclass
class TrainConfig:
    mode: str = "deml"
    meta_learner: str = "metasgd"
    lam: Optional[float] = None
    outer_lr: float = 1e-3
    task_batch: Optional[int] = None
    instance_batch: int = 64
    iterations: int = 2000

    inner_lr: float = 0.01
    inner_steps: int = 1
    alpha_init: float = 0.01

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    val_every: int = 200
    val_tasks: int = 100
    log_every: int = 100

    pretrain_iterations: int = 2000
    pretrained_checkpoint: Optional[Path] = None
    merge_concept_classes: bool = False

    @property
    def effective_lambda(self) -> float:
        """λ after mode defaults: 1.0 for deml, 0 where there is no discriminator."""
        if self.lam is not None:
            return float(self.lam)
        return 1.0 if self.mode == "deml" else 0.0

    def tasks_per_batch(self, k_shot: int) -> int:
        if self.task_batch is not None:
            return self.task_batch
        return 4 if k_shot == 1 else 2


@dataclass
class OutputConfig:
    dir: Path = Path("runs") / "default"
    checkpoint: str = "model.dmlc"
    training_log: str = "training_log.csv"
    results: str = "results.csv"
    sweep: str = "lambda_sweep.csv"


SECTIONS = {
    "data": DataConfig,
    "episodes": EpisodeConfig,
    "generator": GeneratorConfig,
    "learner": LearnerConfig,
    "train": TrainConfig,
    "output": OutputConfig,
}
TOP_LEVEL = ("seed", "workers")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; all randomness derives from ``seed``."""

    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def load(cls, config_path: Path, check_paths: bool = True) -> "ExperimentConfig":
        return parse_config(config_path, check_paths=check_paths)

    def save(self, config_path: Path) -> None:
        """Save the resolved configuration as YAML."""
        config_path = Path(config_path)
        config_path.parent.mkdir(parents=True, exist_ok=True)
        data = {"seed": self.seed, "workers": self.workers}
        for section in SECTIONS:
            values = {}
            for key, value in asdict(getattr(self, section)).items():
                if isinstance(value, Path):
                    value = str(value)
                key = KEY_NAMES.get(key, key)
                values[key] = value
            data[section] = values
        with open(config_path, "w") as f:
            yaml.dump(data, f, default_flow_style=False, sort_keys=False)

    def validate(self, lines: Optional["_LineIndex"] = None, check_paths: bool = True) -> None:
        """Enforce component invariants; raises ConfigError naming the key."""
        _validate(self, lines or _LineIndex(""), check_paths)


class _LineIndex:
    """Best-effort key → line number lookup in the raw config text."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def find(self, section: Optional[str], key: str) -> Optional[int]:
        start = 0
        if section is not None:
            header = re.compile(rf"^\s*(\[\s*{re.escape(section)}\s*\]|{re.escape(section)}\s*:)\s*(#.*)?$")
            for i, line in enumerate(self.lines):
                if header.match(line):
                    start = i + 1
                    break
        pattern = re.compile(rf"^\s*[\"']?{re.escape(key)}[\"']?\s*[=:]")
        for i in range(start, len(self.lines)):
            if pattern.match(self.lines[i]):
                return i + 1
        return None

    def error(self, dotted: str, message: str, suggestion: Optional[str] = None) -> ConfigError:
        section, _, key = dotted.rpartition(".")
        return ConfigError(message, key=dotted, line=self.find(section or None, key), suggestion=suggestion)


def _coerce(value: Any, annotation: Any, dotted: str, lines: _LineIndex) -> Any:
    optional = getattr(annotation, "__origin__", None) is not None and type(None) in getattr(
        annotation, "__args__", ()
    )
    if optional:
        if value is None:
            return None
        annotation = next(a for a in annotation.__args__ if a is not type(None))
    try:
        if annotation is bool:
            if not isinstance(value, bool):
                raise TypeError("expected true/false")
            return value
        if annotation is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError("expected an integer")
            return value
        if annotation is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError("expected a number")
            return float(value)
        if annotation is str:
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
        if annotation is Path:
            return Path(str(value)).expanduser()
        if annotation is list:
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise TypeError("expected a list of integers")
            return list(value)
    except TypeError as exc:
        raise lines.error(dotted, f"{exc}, got {value!r}") from None
    return value


def _build_section(cls, name: str, raw: Any, lines: _LineIndex):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise lines.error(name, "section must be a table of key = value pairs")
    hints = get_type_hints(cls)
    valid = [KEY_NAMES.get(f.name, f.name) for f in fields(cls)]
    kwargs = {}
    for key, value in raw.items():
        attr = ALIASES.get(key, key)
        if attr not in hints or key in ALIASES.values():
            close = difflib.get_close_matches(key, valid, n=1)
            raise lines.error(f"{name}.{key}", "unknown key", close[0] if close else None)
        kwargs[attr] = _coerce(value, hints[attr], f"{name}.{key}", lines)
    return cls(**kwargs)


def _read_raw(path: Path, text: str) -> dict:
    suffix = path.suffix.lower()
    if suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            match = re.search(r"line (\d+)", str(exc))
            raise ConfigError(
                f"TOML syntax error: {exc}", line=int(match.group(1)) if match else None
            ) from None
    if suffix in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(
                f"YAML syntax error: {exc}", line=mark.line + 1 if mark else None
            ) from None
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping")
        return data
    raise ConfigError(f"unsupported config format '{suffix}' (use .toml or .yaml)")


def parse_config(path: Path, check_paths: bool = True) -> ExperimentConfig:
    """Parse and validate an experiment configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    raw = _read_raw(path, text)
    lines = _LineIndex(text)

    valid_top = list(TOP_LEVEL) + list(SECTIONS)
    kwargs = {}
    for key, value in raw.items():
        if key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], key, value, lines)
        elif key in TOP_LEVEL:
            kwargs[key] = _coerce(value, int, key, lines)
        else:
            close = difflib.get_close_matches(key, valid_top, n=1)
            raise ConfigError(
                "unknown key", key=key, line=lines.find(None, key), suggestion=close[0] if close else None
            )
    config = ExperimentConfig(**kwargs)
    config.validate(lines, check_paths=check_paths)
    logger.debug(f"Parsed configuration from {path}")
    return config


def _validate(config: ExperimentConfig, lines: _LineIndex, check_paths: bool) -> None:
    def require(ok: bool, dotted: str, message: str) -> None:
        if not ok:
            raise lines.error(dotted, message)

    require(config.seed >= 0, "seed", "must be non-negative")
    require(config.workers >= 1, "workers", "must be at least 1")

    ep = config.episodes
    require(ep.n_way >= 1, "episodes.n_way", "must be at least 1")
    require(ep.k_shot >= 1, "episodes.k_shot", "must be at least 1")
    for key in ("train_queries", "val_queries", "test_queries"):
        require(getattr(ep, key) >= 1, f"episodes.{key}", "must be at least 1")
    if ep.k_shot not in (1, 5):
        logger.warning(f"k_shot={ep.k_shot} is outside the usual {{1, 5}} settings")

    data = config.data
    require(data.noise >= 0, "data.noise", "must be non-negative")
    require(data.concept_dim >= 1, "data.concept_dim", "must be positive")
    require(0 <= data.nuisance_dim < data.input_dim, "data.nuisance_dim", "must be in [0, input_dim)")
    require(0 <= data.concept_holdout < 1, "data.concept_holdout", "must be in [0, 1)")
    if data.meta_dataset is None:
        require(data.train_classes >= ep.n_way, "data.train_classes", "must be at least n_way")
        require(data.test_classes >= ep.n_way, "data.test_classes", "must be at least n_way")
        require(
            data.val_classes == 0 or data.val_classes >= ep.n_way,
            "data.val_classes",
            "must be 0 (no validation) or at least n_way",
        )
        most = max(ep.train_queries, ep.val_queries, ep.test_queries)
        require(data.per_class >= ep.k_shot + most, "data.per_class", "must be at least k_shot + queries")
        require(data.concept_classes >= 1, "data.concept_classes", "must be positive")
        require(data.concept_per_class >= 2, "data.concept_per_class", "must be at least 2")
    else:
        require(data.split_manifest is not None, "data.split_manifest", "required with data.meta_dataset")

    gen = config.generator
    require(gen.kind in GENERATOR_KINDS, "generator.kind", f"must be one of {GENERATOR_KINDS}")
    require(gen.feature_dim > 0, "generator.feature_dim", "must be positive")
    require(all(w > 0 for w in gen.hidden), "generator.hidden", "widths must be positive")
    if gen.kind == "small-conv":
        require(len(gen.image_shape) == 3, "generator.image_shape", "must be [channels, height, width]")
        require(len(gen.channels) >= 1, "generator.channels", "needs at least one conv layer")
        require(
            len(gen.image_shape) == 3 and prod(gen.image_shape) == data.input_dim,
            "generator.image_shape",
            "product must equal data.input_dim",
        )
        shrink = len(gen.channels) * (gen.kernel_size - 1)
        require(
            min(gen.image_shape[1:]) > shrink,
            "generator.kernel_size",
            "convolutions shrink the image to nothing",
        )

    learner = config.learner
    require(all(w > 0 for w in learner.hidden), "learner.hidden", "widths must be positive")
    require(learner.embedding_dim > 0, "learner.embedding_dim", "must be positive")

    train = config.train
    require(train.mode in MODES, "train.mode", f"must be one of {MODES}")
    require(train.meta_learner in META_LEARNERS, "train.meta_learner", f"must be one of {META_LEARNERS}")
    require(train.lam is None or train.lam >= 0, "train.lambda", "must be non-negative")
    if train.mode in META_ONLY_MODES:
        require(
            train.lam is None or train.lam == 0,
            "train.lambda",
            f"mode '{train.mode}' has no concept discriminator, lambda must be unset or 0",
        )
    if train.mode == "pretrain-only" and train.lam is not None:
        logger.warning("lambda is ignored in pretrain-only mode")
    require(train.outer_lr > 0, "train.outer_lr", "must be positive")
    require(train.task_batch is None or train.task_batch >= 1, "train.task_batch", "must be at least 1")
    require(train.instance_batch >= 1, "train.instance_batch", "must be at least 1")
    require(train.iterations >= 1, "train.iterations", "must be at least 1")
    require(train.pretrain_iterations >= 1, "train.pretrain_iterations", "must be at least 1")
    require(train.inner_lr >= 0, "train.inner_lr", "must be non-negative")
    require(train.inner_steps >= 1, "train.inner_steps", "must be at least 1")
    require(train.val_every >= 0, "train.val_every", "must be non-negative")
    require(train.val_tasks >= 1, "train.val_tasks", "must be at least 1")
    require(train.log_every >= 1, "train.log_every", "must be at least 1")
    require(0 <= train.beta1 < 1 and 0 <= train.beta2 < 1, "train.beta1", "Adam betas must be in [0, 1)")
    require(train.epsilon > 0, "train.epsilon", "must be positive")

    if check_paths:
        for dotted, value in (
            ("data.meta_dataset", data.meta_dataset),
            ("data.concept_dataset", data.concept_dataset),
            ("data.split_manifest", data.split_manifest),
            ("train.pretrained_checkpoint", train.pretrained_checkpoint),
        ):
            require(value is None or Path(value).exists(), dotted, f"file {value} does not exist")
