"""Shared test setup for deepmeta."""

import os
import sys
from pathlib import Path

import pytest

# Add parent dir to path
sys.path.insert(0, str(Path(__file__).parent.parent))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DEEPMETA_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="benchmark reproduction; set DEEPMETA_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_small_config(**train):
    """A benchmark small enough to train in a few seconds."""
    from deepmeta.config import ExperimentConfig

    config = ExperimentConfig(seed=3)
    data = config.data
    data.train_classes, data.val_classes, data.test_classes = 6, 5, 5
    data.per_class = 20
    data.concept_classes, data.concept_per_class = 6, 10
    data.input_dim, data.concept_dim, data.nuisance_dim = 12, 4, 4
    config.generator.hidden = [16]
    config.generator.feature_dim = 8
    config.learner.hidden = [8]
    config.learner.embedding_hidden = [8]
    config.learner.embedding_dim = 4
    config.train.iterations = 3
    config.train.val_every = 2
    config.train.val_tasks = 3
    config.train.instance_batch = 8
    config.train.pretrain_iterations = 2
    config.train.log_every = 1
    for key, value in train.items():
        setattr(config.train, key, value)
    config.validate()
    return config


@pytest.fixture
def small_config():
    return make_small_config()
