"""Training flow: scheduler, optimizer, a short end-to-end run, determinism and divergence."""
import os

import numpy as np
import pytest

import numerics as nx
from checkpoint import load_checkpoint
from config import ExperimentConfig, TrainConfig
from errors import PreconditionError, TrainingDivergedError
from gasa import GasaModel, decode
from run_log import RunRecord
from training import (AdamW, CosineWarmupScheduler, Trainer, TrainingItem, build_model, clip_gradients,
                      cosine_schedule, fit_fixed_batch, make_items, split_dataset, train)


def _experiment(base: ExperimentConfig, **train_updates) -> ExperimentConfig:
    return base.model_copy(update={"train": base.train.model_copy(update=train_updates)})


def _twin_items(sample):
    sphere = sample.class_table.index("sphere")
    return [
        TrainingItem(sample=sample, class_id=sphere, prompt="leftmost sphere", qualifier_index=3,
                     gt_masks=sample.gt_masks(1), gt_centroid=sample.object(1).center, instance_id=1),
        TrainingItem(sample=sample, class_id=sphere, prompt="rightmost sphere", qualifier_index=4,
                     gt_masks=sample.gt_masks(2), gt_centroid=sample.object(2).center, instance_id=2),
    ]


def test_scheduler_warmup_then_cosine():
    scheduler = CosineWarmupScheduler(warmup_steps=4, max_steps=14, start_value=1.0, end_value=0.001)
    assert [scheduler.scale_lr(s) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert scheduler.scale_lr(4) == pytest.approx(1.0)
    assert scheduler.scale_lr(14) == pytest.approx(0.001)
    values = [scheduler.scale_lr(s) for s in range(4, 15)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert cosine_schedule(5, 10, 1.0, 0.0) == pytest.approx(0.5)


def test_adamw_first_step_and_frozen_patterns():
    params = {
        "w": nx.parameter(np.array([1.0, -2.0]), "w"),
        "layers.0.beta": nx.parameter(np.array([0.5]), "layers.0.beta"),
    }
    params["w"].grad = np.array([0.3, -0.1])
    params["layers.0.beta"].grad = np.array([9.0])
    optimizer = AdamW(params, lr=0.1, weight_decay=0.0, frozen=["layers.*.beta"])
    optimizer.step()
    # the bias-corrected first Adam step is lr * sign(g)
    assert np.allclose(params["w"].value, [0.9, -1.9], atol=1e-6)
    assert params["layers.0.beta"].value[0] == 0.5


def test_adamw_decoupled_weight_decay():
    params = {"w": nx.parameter(np.array([2.0]), "w")}
    AdamW(params, lr=0.1, weight_decay=0.5).step()
    assert params["w"].value[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_clip_gradients_global_norm():
    params = {"a": nx.parameter(np.zeros(2), "a"), "b": nx.parameter(np.zeros(1), "b")}
    params["a"].grad = np.array([3.0, 0.0])
    params["b"].grad = np.array([4.0])
    assert clip_gradients(params, 1.0) == pytest.approx(5.0)
    assert np.allclose(params["a"].grad, [0.6, 0.0])
    assert np.allclose(params["b"].grad, [0.8])


def test_split_dataset_holds_out_the_tail(small_dataset):
    train_set, held_out = split_dataset(small_dataset, 0.25)
    assert [s.scene_id for s in held_out] == [small_dataset[-1].scene_id]
    assert len(train_set) == 3
    kept, none = split_dataset(small_dataset[:1], 0.5)
    assert len(kept) == 1 and none == []


def test_make_items_cover_every_object(small_dataset, tiny_experiment):
    rng = np.random.default_rng(0)
    cfg = tiny_experiment.train.model_copy(update={"absent_query_prob": 1.0})
    for sample in small_dataset:
        items = make_items(sample, rng, cfg, tiny_experiment.spatial)
        present = [i for i in items if i.gt_masks is not None]
        assert sorted(i.instance_id for i in present) == sorted(o.instance_id for o in sample.objects)
        absent = [i for i in items if i.gt_masks is None]
        assert len(absent) == 1
        assert absent[0].class_id not in {o.class_id for o in sample.objects}


def test_semantic_union_targets_every_instance(small_twin_scene, tiny_experiment):
    cfg = tiny_experiment.train.model_copy(update={"target_strategy": "semantic_union", "absent_query_prob": 0.0})
    spatial = tiny_experiment.spatial.model_copy(update={"augment_prob": 0.0})
    items = make_items(small_twin_scene, np.random.default_rng(0), cfg, spatial)
    sphere_items = [i for i in items if i.class_id == small_twin_scene.object(1).class_id]
    assert len(sphere_items) == 2
    expected = small_twin_scene.class_masks(small_twin_scene.object(1).class_id)
    assert np.array_equal(sphere_items[0].gt_masks, expected)


def test_training_flow(tmp_path, runs_dir, small_dataset, tiny_experiment):
    """A short run end to end: train, checkpoint, run record, reload."""
    print("\n1. Building model...")
    model = build_model(tiny_experiment)
    run = RunRecord("flow", "train", tiny_experiment.model_dump())

    print("2. Training one epoch...")
    ckpt = str(tmp_path / "model.ckpt")
    result = train(model, small_dataset, tiny_experiment, run=run, checkpoint_path=ckpt)
    assert result.steps > 0
    assert len(result.history) == result.steps
    assert all(np.isfinite(record["total"]) for record in result.history)

    print("3. Checking the run record...")
    loaded = RunRecord.load("flow")
    assert loaded.status == "completed"
    assert len(loaded.steps) == result.steps
    assert len(loaded.epochs) == 1
    assert {"miou", "oracle_miou", "gap"} <= set(loaded.epochs[0])

    print("4. Reloading the checkpoint...")
    restored, meta = load_checkpoint(ckpt)
    assert meta["step"] == result.steps
    for name, value in model.state_dict().items():
        assert np.array_equal(value.astype(np.float32), restored.state_dict()[name])


def test_zero_epochs_checkpoint_equals_initialization(tmp_path, small_dataset, tiny_experiment):
    experiment = _experiment(tiny_experiment, epochs=0, warmup_epochs=0)
    ckpt = str(tmp_path / "init.ckpt")
    train(build_model(experiment), small_dataset, experiment, checkpoint_path=ckpt)
    restored, _ = load_checkpoint(ckpt)
    fresh = build_model(experiment)
    for name, value in fresh.state_dict().items():
        assert np.array_equal(value.astype(np.float32), restored.state_dict()[name]), name


def test_same_seed_gives_identical_checkpoints(tmp_path, small_dataset, tiny_experiment):
    paths = []
    for k in range(2):
        path = str(tmp_path / f"run{k}.ckpt")
        train(build_model(tiny_experiment), small_dataset, tiny_experiment, checkpoint_path=path,
              with_held_out_eval=False)
        paths.append(path)
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_empty_dataset_is_rejected(tiny_experiment):
    with pytest.raises(PreconditionError):
        Trainer(build_model(tiny_experiment), tiny_experiment).fit([])


def test_frozen_zero_beta_matches_kernel_off(small_twin_scene, tiny_model_config):
    frozen = ["encoder.beta", "layers.*.beta"]
    experiment = ExperimentConfig(model=tiny_model_config, train=TrainConfig(frozen=frozen))
    full = GasaModel(tiny_model_config.model_copy(update={"beta_init": 0.0}), seed=4)
    off = GasaModel(tiny_model_config.model_copy(update={"beta_init": 0.0, "kernel": "off"}), seed=4)
    items = _twin_items(small_twin_scene)
    assert fit_fixed_batch(full, items, experiment, 3) == fit_fixed_batch(off, items, experiment, 3)
    for name, value in full.state_dict().items():
        assert np.array_equal(value, off.state_dict()[name]), name
    memory_full = full.encode(small_twin_scene.tokens(4))
    memory_off = off.encode(small_twin_scene.tokens(4))
    a = decode(full, memory_full, small_twin_scene.text_embedding(1), 3)
    b = decode(off, memory_off, small_twin_scene.text_embedding(1), 3)
    assert np.max(np.abs(a.masks - b.masks)) < 1e-9


@pytest.mark.slow
def test_fixed_batch_loss_decreases(small_twin_scene, tiny_experiment):
    model = build_model(tiny_experiment)
    losses = fit_fixed_batch(model, _twin_items(small_twin_scene), tiny_experiment, 50)
    assert all(np.isfinite(losses))
    assert np.mean(losses[-5:]) < losses[0]


def test_divergence_aborts_with_last_good_checkpoint(tmp_path, runs_dir, small_twin_scene, tiny_experiment):
    model = build_model(tiny_experiment)
    run = RunRecord("diverge", "train")
    trainer = Trainer(model, tiny_experiment, run=run, checkpoint_path=str(tmp_path / "model.ckpt"))
    items = _twin_items(small_twin_scene)
    initial = model.state_dict()
    trainer.step(items)
    model.query_embed.value[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        trainer.step(items)
    assert info.value.term == "focal"
    assert info.value.step == 1
    assert info.value.checkpoint_path.endswith("model.last_good.ckpt")

    restored, meta = load_checkpoint(info.value.checkpoint_path)
    assert meta["step"] == 0 and meta["diverged_at"] == 1
    state = restored.state_dict()
    assert all(np.all(np.isfinite(value)) for value in state.values())
    for name, value in initial.items():
        assert np.array_equal(state[name], value.astype(np.float32)), name
    assert RunRecord.load("diverge").status == "diverged"
