"""Run records: what a training, evaluation or ablation run did, step by step."""
import json
import os
from datetime import datetime
from typing import Dict, List, Optional

import config


class RunRecord:
    """Tracks one experiment run and persists it as JSON lines plus a JSON summary."""

    def __init__(self, run_id: str, kind: str, run_config: Optional[Dict] = None,
                 runs_dir: Optional[str] = None):
        """Initialize a run record.

        Args:
            run_id: Unique run identifier (also the file stem)
            kind: "train", "eval", "ablate", ...
            run_config: Configuration the run was started with
            runs_dir: Directory for run files (defaults to config.RUNS_DIR)
        """
        self.run_id = run_id
        self.kind = kind
        self.config = run_config or {}
        self.runs_dir = runs_dir or config.RUNS_DIR
        self.created_at = datetime.utcnow().isoformat() + "Z"
        self.status = "running"
        self.steps: List[Dict] = []
        self.epochs: List[Dict] = []
        self.results: Dict = {}

        os.makedirs(self.runs_dir, exist_ok=True)

    @property
    def log_path(self) -> str:
        return os.path.join(self.runs_dir, f"{self.run_id}.jsonl")

    @property
    def summary_path(self) -> str:
        return os.path.join(self.runs_dir, f"{self.run_id}.json")

    def _append(self, record: Dict):
        with open(self.log_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def add_step(self, record: Dict):
        """Record one optimizer step (a LossReport record)."""
        self.steps.append(record)
        self._append(record)

    def add_epoch(self, epoch: int, metrics: Dict):
        record = {"kind": "epoch", "epoch": epoch}
        record.update(metrics)
        self.epochs.append(record)
        self._append(record)

    def finish(self, status: str = "completed", results: Optional[Dict] = None):
        self.status = status
        if results:
            self.results.update(results)
        self.save()

    def to_dict(self) -> Dict:
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "config": self.config,
            "created_at": self.created_at,
            "status": self.status,
            "steps": len(self.steps),
            "last_step": self.steps[-1] if self.steps else None,
            "epochs": self.epochs,
            "results": self.results,
        }

    def save(self):
        """Write the JSON summary."""
        with open(self.summary_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        print(f"Run record saved: {self.summary_path}")

    @staticmethod
    def load(run_id: str, runs_dir: Optional[str] = None) -> Optional["RunRecord"]:
        """Load a run record from disk.

        Returns:
            RunRecord or None if not found
        """
        runs_dir = runs_dir or config.RUNS_DIR
        summary_path = os.path.join(runs_dir, f"{run_id}.json")
        if not os.path.exists(summary_path):
            return None

        with open(summary_path, "r") as f:
            data = json.load(f)

        record = RunRecord(data["run_id"], data.get("kind", "unknown"), data.get("config", {}), runs_dir)
        record.created_at = data.get("created_at", record.created_at)
        record.status = data.get("status", "unknown")
        record.results = data.get("results", {})
        if os.path.exists(record.log_path):
            with open(record.log_path, "r") as f:
                for line in f:
                    if not line.strip():
                        continue
                    entry = json.loads(line)
                    if entry.get("kind") == "step":
                        record.steps.append(entry)
                    elif entry.get("kind") == "epoch":
                        record.epochs.append(entry)
        return record

    @staticmethod
    def list_runs(runs_dir: Optional[str] = None) -> List[str]:
        runs_dir = runs_dir or config.RUNS_DIR
        if not os.path.exists(runs_dir):
            return []
        return sorted(f[:-len(".json")] for f in os.listdir(runs_dir) if f.endswith(".json"))

    def get_summary(self) -> str:
        """Human-readable summary of the run."""
        summary = f"Run: {self.run_id} ({self.kind})\n"
        summary += f"Created: {self.created_at}\n"
        summary += f"Status: {self.status}\n"
        summary += f"\nSteps logged: {len(self.steps)}\n"
        if self.steps:
            last = self.steps[-1]
            summary += f"  last step {last['step']}: total {last['total']:.5f}\n"

        summary += f"\nEpochs ({len(self.epochs)}):\n"
        for epoch in self.epochs:
            metrics = ", ".join(
                f"{k}={v:.4f}" for k, v in epoch.items() if isinstance(v, float)
            )
            summary += f"  - epoch {epoch['epoch']}: {metrics}\n"

        if self.results:
            summary += "\nResults:\n"
            for key, value in self.results.items():
                if isinstance(value, (int, float, str)):
                    summary += f"  {key}: {value}\n"
        return summary
