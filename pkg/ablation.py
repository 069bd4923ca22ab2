"""Component ablations and the query-count sweep."""
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import AblationFlags, ExperimentConfig
from evaluation import evaluate
from run_log import RunRecord
from scenegen import SceneSample
from training import Trainer, build_model, split_dataset

VARIANTS: List[Tuple[str, AblationFlags]] = [
    ("full", AblationFlags()),
    ("kernel-off", AblationFlags(gasa_kernel="off")),
    ("pe-off", AblationFlags(world_pe=False)),
    ("both-off", AblationFlags(gasa_kernel="off", world_pe=False)),
    ("rbf-kernel", AblationFlags(gasa_kernel="rbf")),
]


@dataclass
class AblationRow:
    name: str
    flags: AblationFlags
    miou: float
    oracle_miou: float
    delta: float = 0.0
    per_seed: List[float] = field(default_factory=list)


@dataclass
class AblationTable:
    rows: List[AblationRow]
    seeds: List[int]

    def row(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def format_table(self) -> str:
        lines = [f"{'variant':<14}{'kernel':>9}{'pe':>6}{'mIoU':>9}{'oracle':>9}{'delta':>9}"]
        for row in self.rows:
            lines.append(
                f"{row.name:<14}{row.flags.gasa_kernel:>9}{'on' if row.flags.world_pe else 'off':>6}"
                f"{row.miou:>9.4f}{row.oracle_miou:>9.4f}{row.delta:>+9.4f}"
            )
        return "\n".join(lines)

    def to_dict(self) -> Dict:
        return {
            "seeds": self.seeds,
            "rows": [
                {"name": r.name, "flags": r.flags.model_dump(), "miou": r.miou,
                 "oracle_miou": r.oracle_miou, "delta": r.delta, "per_seed": r.per_seed}
                for r in self.rows
            ],
        }

    def write_json(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def _train_and_score(samples: Sequence[SceneSample], experiment: ExperimentConfig, seed: int,
                     workers: int) -> Tuple[float, float]:
    train_set, held_out = split_dataset(samples, experiment.train.eval_fraction)
    held_out = held_out or train_set
    experiment = experiment.model_copy(update={"train": experiment.train.model_copy(update={"seed": seed})})
    model = build_model(experiment, seed)
    Trainer(model, experiment).fit(train_set)
    report = evaluate(model, held_out, experiment.eval, experiment.spatial, workers=workers)
    return report.miou, report.oracle_miou


def run_ablation_suite(samples: Sequence[SceneSample], base: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2),
                       run: Optional[RunRecord] = None, workers: int = 1) -> AblationTable:
    """Train every variant under identical seeds and schedule; deltas are against `full`."""
    rows = []
    for name, flags in VARIANTS:
        experiment = base.model_copy(update={"train": base.train.model_copy(update={"ablation": flags})})
        scores = [_train_and_score(samples, experiment, seed, workers) for seed in seeds]
        row = AblationRow(
            name=name, flags=flags,
            miou=float(np.mean([s[0] for s in scores])),
            oracle_miou=float(np.mean([s[1] for s in scores])),
            per_seed=[s[0] for s in scores],
        )
        rows.append(row)
        print(f"Ablation {name}: mIoU {row.miou:.4f} (oracle {row.oracle_miou:.4f})")
        if run:
            run.add_epoch(len(rows) - 1, {"variant": name, "miou": row.miou, "oracle_miou": row.oracle_miou})

    full = rows[0].miou
    for row in rows:
        row.delta = row.miou - full
    table = AblationTable(rows=rows, seeds=list(seeds))
    if run:
        run.finish("completed", table.to_dict())
    return table


def run_query_count_sweep(samples: Sequence[SceneSample], base: ExperimentConfig,
                          counts: Sequence[int] = (1, 3, 5, 10), seed: int = 0,
                          workers: int = 1) -> List[Dict]:
    """Predicted and oracle mIoU per number of decoder queries."""
    results = []
    for count in counts:
        experiment = base.model_copy(update={"model": base.model.model_copy(update={"num_queries": count})})
        miou, oracle = _train_and_score(samples, experiment, seed, workers)
        results.append({"num_queries": count, "miou": miou, "oracle_miou": oracle, "gap": oracle - miou})
        print(f"Queries {count}: mIoU {miou:.4f}, oracle {oracle:.4f}")
    return results
