"""deepmeta - meta-learning with a jointly trained concept generator."""

__version__ = "0.1.0"
__license__ = "MIT"

from .autodiff import Graph, Node
from .config import ExperimentConfig, parse_config
from .episodes import Episode, LabeledDataset, TaskDistribution, build_datasets
from .errors import DeepMetaError
from .evaluation import EvalReport, meta_test
from .trainer import run_training

__all__ = [
    "Graph",
    "Node",
    "ExperimentConfig",
    "parse_config",
    "Episode",
    "LabeledDataset",
    "TaskDistribution",
    "build_datasets",
    "DeepMetaError",
    "EvalReport",
    "meta_test",
    "run_training",
]
