"""Shared fixtures: tiny configs and scenes that keep the suite fast."""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import DatasetSpec, ExperimentConfig, ModelConfig, SceneDefaults, TrainConfig
from scenegen import default_class_table, generate_dataset, make_twin_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(dim=16, num_heads=2, num_queries=4, num_layers=2, ffn_mult=2, feature_dim=8,
                       kernel_hidden=32, pe_frequencies=4, centroid_hidden=8, block_size=4)


@pytest.fixture
def small_scene_defaults():
    return SceneDefaults(num_views=2, width=16, height=16, feature_dim=8, focal=24.0)


@pytest.fixture
def twin_scene():
    """Default-size twin fixture, 3 m apart, no noise."""
    return make_twin_scene(3.0, seed=0, depth_noise=0.0, feature_noise=0.0)


@pytest.fixture
def small_twin_scene(small_scene_defaults):
    return make_twin_scene(1.0, seed=0, depth_noise=0.0, feature_noise=0.0, defaults=small_scene_defaults)


@pytest.fixture
def small_dataset_spec(small_scene_defaults):
    return DatasetSpec(num_scenes=4, twin_fraction=0.25, seed=3, scene=small_scene_defaults)


@pytest.fixture
def small_dataset(small_dataset_spec):
    return generate_dataset(small_dataset_spec)


@pytest.fixture
def tiny_experiment(tiny_model_config, small_dataset_spec):
    return ExperimentConfig(
        model=tiny_model_config,
        train=TrainConfig(epochs=1, batch_size=2, warmup_epochs=1, eval_fraction=0.25),
        dataset=small_dataset_spec,
    )


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    import config
    path = str(tmp_path / "runs")
    monkeypatch.setattr(config, "RUNS_DIR", path)
    return path


@pytest.fixture(scope="session")
def default_dataset():
    """The default 50-scene dataset; only the slow tests ask for it."""
    return generate_dataset(DatasetSpec())


@pytest.fixture(scope="session")
def trained_default(default_dataset):
    """Full model trained once with the default experiment. Returns (model, experiment, held-out scenes)."""
    from training import Trainer, build_model, split_dataset

    experiment = ExperimentConfig()
    train_set, held_out = split_dataset(default_dataset, experiment.train.eval_fraction)
    model = build_model(experiment)
    Trainer(model, experiment).fit(train_set)
    return model, experiment, held_out
