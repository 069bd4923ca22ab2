"""Ablation suite and query-count sweep on a tiny dataset."""
import json

import pytest

from ablation import VARIANTS, run_ablation_suite, run_query_count_sweep
from config import AblationFlags, ExperimentConfig
from run_log import RunRecord


def test_variants_cover_kernel_and_pe_switches():
    names = [name for name, _ in VARIANTS]
    assert names == ["full", "kernel-off", "pe-off", "both-off", "rbf-kernel"]
    both = dict(VARIANTS)["both-off"]
    assert both.gasa_kernel == "off" and not both.world_pe


def test_flags_apply_to_model_config(tiny_model_config):
    model_cfg = AblationFlags(gasa_kernel="rbf", world_pe=False, spatial_tokens=False).apply(tiny_model_config)
    assert (model_cfg.kernel, model_cfg.world_pe, model_cfg.spatial_tokens) == ("rbf", False, False)
    assert model_cfg.dim == tiny_model_config.dim
    assert tiny_model_config.kernel == "learned"


@pytest.mark.slow
def test_ablation_suite(tmp_path, runs_dir, small_dataset, tiny_experiment):
    print("\n1. Running every variant with one seed...")
    run = RunRecord("ablate", "ablate")
    table = run_ablation_suite(small_dataset, tiny_experiment, seeds=[0], run=run)

    print("2. Checking the table...")
    assert [row.name for row in table.rows] == [name for name, _ in VARIANTS]
    assert table.row("full").delta == 0.0
    for row in table.rows:
        assert 0.0 <= row.miou <= row.oracle_miou <= 1.0
        assert row.delta == pytest.approx(row.miou - table.row("full").miou)
        assert len(row.per_seed) == 1
    text = table.format_table()
    assert all(name in text for name, _ in VARIANTS)

    print("3. Checking outputs on disk...")
    with open(table.write_json(str(tmp_path / "ablation.json"))) as f:
        assert len(json.load(f)["rows"]) == 5
    loaded = RunRecord.load("ablate")
    assert loaded.status == "completed"
    assert len(loaded.epochs) == 5


@pytest.mark.slow
def test_query_count_sweep(small_dataset, tiny_experiment):
    rows = run_query_count_sweep(small_dataset, tiny_experiment, counts=(1, 2))
    assert [r["num_queries"] for r in rows] == [1, 2]
    # with one query, selection cannot miss the oracle
    assert rows[0]["gap"] == pytest.approx(0.0)
    assert all(r["gap"] >= 0.0 for r in rows)


@pytest.mark.slow
def test_ablation_ordering_over_three_seeds(default_dataset):
    table = run_ablation_suite(default_dataset, ExperimentConfig(), seeds=[0, 1, 2])
    print("\n" + table.format_table())
    full = table.row("full").miou
    for name in ("kernel-off", "pe-off", "both-off", "rbf-kernel"):
        assert full > table.row(name).miou, name
    assert min(table.rows, key=lambda row: row.miou).name == "both-off"
