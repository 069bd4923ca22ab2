"""Command-line entry point: gen, train, eval, ablate, query, gradcheck."""
import argparse
import os
import sys
from typing import List, Optional

import config
from ablation import run_ablation_suite, run_query_count_sweep
from checkpoint import load_checkpoint
from config import ExperimentConfig, load_config
from errors import GasaError, UsageError
from evaluation import GroundTruthPredictor, evaluate
from geometry import camera_relative_phrase
from grounding import GroundingResult, ground_query, ground_query_oracle
from run_log import RunRecord
from scenegen import SceneSample, generate_dataset, make_twin_scene, read_dataset, read_scene, write_dataset
from training import build_model, train
from verification import run_gradcheck_suite, suite_passed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="Experiment config (JSON)")
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument("--threads", type=int, default=config.DEFAULT_THREADS,
                        help="Worker threads for generation and evaluation (1 = deterministic)")
    common.add_argument("--out", help="Output path")

    parser = CliParser(prog="gasa", description="Geometry-aware grounding on synthetic multi-view scenes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--dataset", required=True, help="Dataset directory")
    p.add_argument("--epochs", type=int, help="Override the configured epoch count")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="Checkpoint to evaluate (omit with --ground-truth)")
    p.add_argument("--ground-truth", action="store_true", help="Evaluate the ground-truth baseline")
    p.add_argument("--object-aware", action="store_true", help="Select masks with the spatial resolver")

    p = sub.add_parser("ablate", parents=[common], help="Train and compare ablation variants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", type=int, default=3, help="Number of training seeds per variant")
    p.add_argument("--query-sweep", action="store_true", help="Also sweep the number of decoder queries")

    p = sub.add_parser("query", parents=[common], help="Ground one text prompt in one scene")
    p.add_argument("--text", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="Resolve over ground-truth instances")
    p.add_argument("--dataset")
    p.add_argument("--scene", type=int, default=0, help="Scene index within --dataset")
    p.add_argument("--twin", type=float, help="Use a twin-sphere scene with this separation (m)")
    p.add_argument("--view", type=int, help="Reference view for spatial qualifiers")
    p.add_argument("--object-aware", action="store_true")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every operation")
    p.add_argument("--seeds", type=int, default=10)
    return parser


def _experiment(args) -> ExperimentConfig:
    experiment = load_config(args.config)
    if args.seed is not None:
        experiment = experiment.model_copy(update={
            "train": experiment.train.model_copy(update={"seed": args.seed}),
            "dataset": experiment.dataset.model_copy(update={"seed": args.seed}),
        })
    return experiment


def _run_id(kind: str, experiment: ExperimentConfig) -> str:
    return f"{kind}_seed{experiment.train.seed}_{os.getpid()}"


def cmd_gen(args) -> int:
    experiment = _experiment(args)
    out = args.out or os.path.join(config.OUTPUT_DIR, "dataset")
    samples = generate_dataset(experiment.dataset, workers=args.threads)
    write_dataset(out, samples, experiment.dataset.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    experiment = _experiment(args)
    if args.epochs is not None:
        experiment = experiment.model_copy(update={
            "train": experiment.train.model_copy(update={"epochs": args.epochs})
        })
    samples = read_dataset(args.dataset)
    out = args.out or os.path.join(config.OUTPUT_DIR, "model.ckpt")
    run = RunRecord(_run_id("train", experiment), "train", experiment.model_dump())
    model = build_model(experiment)
    result = train(model, samples, experiment, run=run, checkpoint_path=out)
    print(f"Checkpoint written: {out} ({result.steps} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    experiment = _experiment(args)
    if not args.checkpoint and not args.ground_truth:
        raise UsageError("eval needs --checkpoint (or --ground-truth)")
    samples = read_dataset(args.dataset)
    protocol = experiment.eval.model_copy(update={"object_aware": args.object_aware or experiment.eval.object_aware})
    predictor = GroundTruthPredictor(experiment.spatial) if args.ground_truth else load_checkpoint(args.checkpoint)[0]
    report = evaluate(predictor, samples, protocol, experiment.spatial, workers=args.threads)
    print(report.format_table())
    out = args.out or os.path.join(config.OUTPUT_DIR, "eval_report.json")
    report.write_json(out)
    print(f"Report written: {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    experiment = _experiment(args)
    samples = read_dataset(args.dataset)
    seeds = [experiment.train.seed + k for k in range(args.seeds)]
    run = RunRecord(_run_id("ablate", experiment), "ablate", experiment.model_dump())
    table = run_ablation_suite(samples, experiment, seeds, run=run, workers=args.threads)
    print(table.format_table())
    out = args.out or os.path.join(config.OUTPUT_DIR, "ablation.json")
    table.write_json(out)
    print(f"Table written: {out}")
    if args.query_sweep:
        for row in run_query_count_sweep(samples, experiment, seed=seeds[0], workers=args.threads):
            print(f"  Q={row['num_queries']:>3}  mIoU {row['miou']:.4f}  oracle {row['oracle_miou']:.4f}")
    return EXIT_OK


def _query_scene(args, experiment: ExperimentConfig) -> SceneSample:
    if args.twin is not None:
        return make_twin_scene(args.twin, seed=experiment.dataset.seed, defaults=experiment.dataset.scene)
    if not args.dataset:
        raise UsageError("query needs --dataset (with --scene) or --twin")
    return read_scene(args.dataset, args.scene)


def _print_result(result: GroundingResult, sample: SceneSample):
    prediction = result.prediction
    if prediction is not None:
        print("Masks:")
        for q, conf in enumerate(prediction.confidences):
            pixels = (prediction.masks[q] > 0.5).sum(axis=(1, 2))
            marker = "*" if q == result.selected else " "
            print(f" {marker} query {q:>2}  conf {conf:.3f}  pixels per view {pixels.tolist()}")
        print(f"Presence: {prediction.presence:.3f}")
        print(f"Selected query: {result.selected}")
    else:
        print(f"Selected instance: {result.selected}")
    print(f"View: {result.view}  mask pixels: {int((result.mask > 0.5).sum())}")
    if result.satisfied is not None:
        print(f"Relation satisfied: {result.satisfied}")
    x, y, z = result.centroid
    print(f"Centroid: {x:.3f} {y:.3f} {z:.3f} meters")
    camera = sample.views[result.view].camera
    print(f"Relative to camera {result.view}: {camera_relative_phrase(camera, result.centroid)}")


def cmd_query(args) -> int:
    experiment = _experiment(args)
    if not args.oracle and not args.checkpoint:
        raise UsageError("query needs --checkpoint unless --oracle is given")
    spatial = experiment.spatial
    if args.view is not None:
        spatial = spatial.model_copy(update={"reference_view": args.view})
    sample = _query_scene(args, experiment)
    if not 0 <= spatial.reference_view < sample.num_views:
        raise UsageError(f"--view must be in [0, {sample.num_views - 1}]")
    if args.oracle:
        result = ground_query_oracle(sample, args.text, spatial)
    else:
        model, _ = load_checkpoint(args.checkpoint)
        result = ground_query(model, sample, args.text, spatial, object_aware=args.object_aware)
    _print_result(result, sample)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(seeds=args.seeds)
    if args.out:
        with open(args.out, "w") as f:
            for name, error in results.items():
                f.write(f"{name}\t{error:.6e}\n")
    if suite_passed(results):
        print("All gradient checks passed.")
        return EXIT_OK
    print("Gradient checks FAILED.")
    return EXIT_FAILURE


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "query": cmd_query,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"Usage error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE
    except GasaError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except SystemExit as e:
        # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
