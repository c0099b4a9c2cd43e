"""Tests for experiment configuration files."""

from pathlib import Path

import pytest
from loguru import logger

from deepmeta.config import ExperimentConfig, parse_config
from deepmeta.models import Conv, build_generator
from deepmeta.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_bundled_configs_parse():
    """Test the shipped TOML and YAML configs."""
    toml = parse_config(CONFIGS / "deml.toml")
    assert toml.train.mode == "deml"
    assert toml.train.lam == 1.0
    assert toml.generator.hidden == [64]
    assert toml.output.dir == Path("runs/deml-metasgd")

    yaml_config = parse_config(CONFIGS / "decaf.yaml")
    assert yaml_config.train.mode == "decaf-frozen"
    assert yaml_config.data.independent_rendering is True
    assert yaml_config.train.effective_lambda == 0.0

    conv = parse_config(CONFIGS / "small-conv.yaml")
    network = build_generator(conv.generator, conv.data.input_dim)
    assert [layer.kernel_size for layer in network.layers if isinstance(layer, Conv)] == [3, 3]
    assert network.output_dim == 32


def test_unknown_key_suggests_closest(tmp_path):
    """Test a misspelt key names its line and a suggestion."""
    path = _write(tmp_path, "c.toml", "seed = 1\n\n[train]\nmode = \"deml\"\nlamda = 0.5\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "train.lamda"
    assert info.value.line == 5
    assert info.value.suggestion == "lambda"
    assert "did you mean 'lambda'" in str(info.value)


def test_unknown_section(tmp_path):
    path = _write(tmp_path, "c.yaml", "trian:\n  mode: deml\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.suggestion == "train"


def test_wrong_type_is_rejected(tmp_path):
    path = _write(tmp_path, "c.yaml", "episodes:\n  n_way: five\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "episodes.n_way"
    assert info.value.line == 2


def test_lambda_only_with_discriminator(tmp_path):
    """Test modes without a concept discriminator reject a positive lambda."""
    path = _write(tmp_path, "c.toml", "[train]\nmode = \"vanilla\"\nlambda = 0.5\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "train.lambda"
    assert info.value.line == 3

    path = _write(tmp_path, "ok.toml", "[train]\nmode = \"decaf-finetune\"\nlambda = 0.0\n")
    assert parse_config(path).train.effective_lambda == 0.0


def test_negative_lambda(tmp_path):
    path = _write(tmp_path, "c.toml", "[train]\nlambda = -1.0\n")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_syntax_errors(tmp_path):
    with pytest.raises(ConfigError, match="TOML"):
        parse_config(_write(tmp_path, "c.toml", "[train\nmode = 1\n"))
    with pytest.raises(ConfigError, match="YAML"):
        parse_config(_write(tmp_path, "c.yaml", "train: [\n"))
    with pytest.raises(ConfigError, match="unsupported"):
        parse_config(_write(tmp_path, "c.ini", "[train]\n"))
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "missing.toml")


def test_unusual_shot_count_warns(tmp_path):
    """Test k_shot outside {1, 5} is accepted with a warning."""
    messages = []
    handler = logger.add(messages.append, level="WARNING")
    try:
        config = parse_config(_write(tmp_path, "c.toml", "[episodes]\nk_shot = 3\n"))
    finally:
        logger.remove(handler)
    assert config.episodes.k_shot == 3
    assert any("k_shot=3" in message for message in messages)


def test_small_conv_shape_must_fit(tmp_path):
    path = _write(tmp_path, "c.yaml", "generator:\n  kind: small-conv\n  image_shape: [1, 4, 4]\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "generator.image_shape"

    path = _write(tmp_path, "deep.yaml", "generator:\n  kind: small-conv\n  channels: [4, 8]\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == "generator.kernel_size"


def test_missing_data_file(tmp_path):
    path = _write(tmp_path, "c.toml", "[data]\nmeta_dataset = \"nope.dmld\"\nsplit_manifest = \"nope.txt\"\n")
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(path)
    assert parse_config(path, check_paths=False).data.meta_dataset == Path("nope.dmld")


def test_save_and_load(tmp_path):
    """Test the saved YAML loads back to the same configuration."""
    config = ExperimentConfig(seed=7)
    config.train.mode = "deml"
    config.train.lam = 0.5
    config.generator.hidden = [16, 8]
    config.output.dir = tmp_path / "run"
    path = tmp_path / "saved.yaml"
    config.save(path)
    assert "lambda: 0.5" in path.read_text()
    assert ExperimentConfig.load(path) == config
