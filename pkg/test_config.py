"""Experiment config loading and validation."""
import json

import pytest

from config import (ExperimentConfig, LossWeights, ModelConfig, TrainConfig, load_config,
                    validate_section)
from errors import ConfigError


def _write(tmp_path, data):
    path = tmp_path / "experiment.json"
    path.write_text(data if isinstance(data, str) else json.dumps(data))
    return str(path)


def test_defaults_without_a_file():
    experiment = load_config(None)
    assert experiment.model.num_spatial_tokens == 8
    assert experiment.loss.lambda_focal == 2.0
    assert experiment.train.frozen == []


def test_partial_file_keeps_other_defaults(tmp_path):
    experiment = load_config(_write(tmp_path, {"model": {"dim": 32, "num_heads": 2}, "train": {"epochs": 3}}))
    assert experiment.model.dim == 32
    assert experiment.train.epochs == 3
    assert experiment.loss == LossWeights()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.json"))


def test_invalid_json(tmp_path):
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(_write(tmp_path, "{model: }"))


def test_invalid_field_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match="loss.lambda_dice"):
        load_config(_write(tmp_path, {"loss": {"lambda_dice": -1.0}}))
    with pytest.raises(ConfigError, match="model"):
        load_config(_write(tmp_path, {"model": {"kernel": "cubic"}}))


def test_model_validators():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(dim=10, num_heads=4)
    with pytest.raises(ValueError, match="num_spatial_tokens"):
        ModelConfig(num_spatial_tokens=6)
    with pytest.raises(ValueError, match="kernel_clamp"):
        ModelConfig(kernel_clamp=[0.0, -10.0])


def test_train_validators():
    with pytest.raises(ValueError, match="warmup_epochs"):
        TrainConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig(epochs=0, warmup_epochs=2).epochs == 0


def test_validate_section_wraps_errors():
    assert validate_section(TrainConfig, {"epochs": 1, "warmup_epochs": 0}).epochs == 1
    with pytest.raises(ConfigError, match="TrainConfig"):
        validate_section(TrainConfig, {"batch_size": "many"})


def test_round_trip_through_json(tmp_path, tiny_experiment):
    experiment = load_config(_write(tmp_path, tiny_experiment.model_dump()))
    assert experiment == tiny_experiment
    assert isinstance(experiment, ExperimentConfig)
