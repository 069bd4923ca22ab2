"""Utility script to view run records."""
import sys

import config
from run_log import RunRecord


def view_run(run_id: str):
    """Print a run record.

    Args:
        run_id: The run ID to view
    """
    record = RunRecord.load(run_id)

    if not record:
        print(f"Run record not found: {run_id}")
        return

    print("\n" + "=" * 80)
    print(record.get_summary())
    print("=" * 80)

    if record.steps:
        print("\n" + "-" * 80)
        print("LOSS TERMS (last 5 steps):")
        print("-" * 80)
        for step in record.steps[-5:]:
            terms = "  ".join(
                f"{name}={step[name]:.4f}"
                for name in ("focal", "dice", "align", "contrastive", "centroid", "presence")
            )
            print(f"step {step['step']:>5}  total={step['total']:.4f}  {terms}")


def list_all_runs():
    """List all run records."""
    runs = RunRecord.list_runs()

    if not runs:
        print(f"No run records found in {config.RUNS_DIR}.")
        return

    print(f"\nFound {len(runs)} run(s):\n")
    for run_id in runs:
        print(f"  - {run_id}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        view_run(sys.argv[1])
    else:
        list_all_runs()
        print("\nUsage: python view_run.py <run_id>")
