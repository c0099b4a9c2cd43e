"""Directional benchmark reproductions on the default synthetic benchmark.

These train full 2000-iteration models and take tens of minutes; they run
only with ``DEEPMETA_SLOW=1``.
"""

from dataclasses import replace

import pytest

from deepmeta.config import ExperimentConfig
from deepmeta.episodes import build_datasets
from deepmeta.evaluation import lambda_sweep, meta_test, model_from_stores, write_sweep
from deepmeta.trainer import run_training

pytestmark = pytest.mark.slow


def _accuracy(config, datasets):
    result = run_training(config, datasets)
    model = model_from_stores(config, result.selected_stores, datasets.meta.input_dim)
    episodes = config.episodes
    dist = datasets.distribution("test", episodes.n_way, episodes.k_shot, episodes.test_queries)
    return meta_test(model, dist, 600, config.seed, workers=config.workers)


def _with_mode(config, mode):
    return replace(config, train=replace(config.train, mode=mode))


def test_deml_beats_deep_vanilla():
    """Test DEML+Meta-SGD beats the same architecture without the discriminator."""
    config = ExperimentConfig()
    datasets = build_datasets(config)
    deml = _accuracy(_with_mode(config, "deml"), datasets)
    vanilla = _accuracy(_with_mode(config, "deep-vanilla"), datasets)
    assert deml.mean_accuracy - deml.ci95_halfwidth > vanilla.mean_accuracy + vanilla.ci95_halfwidth


def test_lambda_inverted_u(tmp_path):
    """Test concept accuracy grows with lambda and few-shot accuracy peaks in between."""
    config = ExperimentConfig()
    rows = lambda_sweep(config, [0.01, 1.0, 10.0], build_datasets(config))
    write_sweep(rows, tmp_path / "lambda_sweep.csv")
    low, mid, high = rows
    assert high["disc_acc"] >= low["disc_acc"]
    assert mid["fewshot_acc"] >= low["fewshot_acc"]
    assert mid["fewshot_acc"] >= high["fewshot_acc"]


def test_deml_beats_decaf_on_dissimilar_concepts():
    config = ExperimentConfig()
    config.data.independent_rendering = True
    datasets = build_datasets(config)
    deml = _accuracy(_with_mode(config, "deml"), datasets)
    decaf = _accuracy(_with_mode(config, "decaf-frozen"), datasets)
    assert deml.mean_accuracy >= decaf.mean_accuracy
