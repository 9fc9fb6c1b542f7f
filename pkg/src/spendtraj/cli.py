"""Command-line entry point: gen, score, train, sweep, extract, segment, plot,
benchmark, and run-all for the whole chain.

Every command writes its outputs atomically and a ``<output>.manifest.json``
beside the primary output. Exit codes: 0 ok, 1 I/O, 2 usage or config,
3 schema or parse, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataset, models, nncore, personality, segment, synthgen, transfer
from ._io import dump_json, sha256_file
from .errors import ConfigError, SpendTrajError

SEED_ENV = "SPENDTRAJ_SEED"
DEFAULT_SEED = 2021

# pretraining defaults used by `train` and `run-all`
TRAIN_DEFAULTS = models.TrainHyper(epochs=100, lr=3e-3, batch_size=32, patience=15)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_h_range(text: str) -> list:
    """``"1..6"`` or ``"1,2,4"`` to a sorted list of hidden sizes."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse hidden sizes {text!r}; use 1..6 or 1,2,3") from None
    if len(values) < 2 or min(values) < 1:
        raise ConfigError(f"need at least two positive hidden sizes, got {text!r}")
    return values


def write_manifest(command: str, out, config: dict, seed: int, inputs=(), outputs=()) -> Path:
    outputs = [Path(p) for p in outputs] or [Path(out)]
    doc = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "versions": {
            "spendtraj": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    return dump_json(doc, f"{out}.manifest.json", indent=2)


def _table_for(args, m: int):
    if getattr(args, "coeffs", None):
        table = personality.load_coefficients(args.coeffs)
        if table.m != m:
            raise ConfigError(f"coefficient table has {table.m} categories, data has {m}")
        return table
    return personality.default_table(m)


def _inputs(args, *names):
    return [getattr(args, n) for n in names if getattr(args, n, None)]


def _config(args) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    config = synthgen.GenConfig(
        n_customers=args.customers, n_years=args.years, n_categories=args.categories,
        personality_strength=args.alpha, noise_sd=args.sigma, event_prob=args.rho,
        event_magnitude=args.delta, master_seed=args.seed,
    ).validate()
    table = _table_for(args, config.n_categories)
    cube = synthgen.generate_population(config, table)
    dataset.save_jsonl(cube, args.out)
    write_manifest("gen", args.out, config.to_dict(), args.seed, _inputs(args, "coeffs"))


def cmd_score(args):
    cube = dataset.load_jsonl(args.data)
    scores = personality.score_cube(cube, _table_for(args, cube.shape[2]))
    personality.save_personality_jsonl(cube, scores, args.out)
    write_manifest("score", args.out, _config(args), args.seed, _inputs(args, "data", "coeffs"))


def _hyper(args) -> models.TrainHyper:
    hyper = models.TrainHyper(args.epochs, args.lr, args.batch_size, args.patience)
    if hyper.epochs < 1 or hyper.batch_size < 1 or not hyper.lr > 0 or hyper.patience < 0:
        raise ConfigError("epochs and batch size must be >= 1, lr > 0, patience >= 0")
    return hyper


def cmd_train(args):
    cube = dataset.load_jsonl(args.data)
    kind = models.resolve_kind(args.arch)
    scores = None
    if kind.endswith("predictor"):
        scores = personality.score_cube(cube, _table_for(args, cube.shape[2]))
    bundle, report = models.fit_on_cube(
        kind, cube, scores, h=args.hidden, hyper=_hyper(args), seed=args.seed,
        train_fraction=args.train_fraction, target_mode=args.target_mode,
    )
    bundle.train_meta["best_epoch"] = report.best_epoch
    nncore.save_model(bundle, args.out)
    write_manifest("train", args.out, _config(args), args.seed, _inputs(args, "data", "coeffs"))


def cmd_sweep(args):
    cube = dataset.load_jsonl(args.data)
    scores = personality.score_cube(cube, _table_for(args, cube.shape[2]))
    x, y = models.training_data("rnn_predictor", cube, scores, args.target_mode)
    tr, va = dataset.split_indices(cube.n, args.train_fraction, args.seed)
    result = models.elbow_sweep(
        x[tr], y[tr], parse_h_range(args.h), args.runs, x_val=x[va], y_val=y[va],
        hyper=_hyper(args), seed=args.seed, target_mode=args.target_mode,
        threshold=args.threshold, workers=args.threads,
    )
    dump_json(result.to_dict(), args.out, indent=2)
    write_manifest("sweep", args.out, _config(args), args.seed, _inputs(args, "data", "coeffs"))


def cmd_extract(args):
    cube = dataset.load_jsonl(args.data)
    bundle = nncore.load_model(args.model)
    scores = personality.score_cube(cube, _table_for(args, cube.shape[2]))
    states = models.extract_states(bundle, cube.spend)
    trajectories = segment.build_trajectories(cube.customer_ids, states, scores.overall)
    segment.save_trajectories(trajectories, args.out)
    write_manifest("extract", args.out, _config(args), args.seed,
                   _inputs(args, "data", "model", "coeffs"))


def segment_document(trajectories, depth: int, n_perm: int, seed: int) -> dict:
    stacked = segment.stack_points(trajectories)
    pers = np.stack([t.personality for t in trajectories])
    ranks = np.array([t.dominance for t in trajectories])
    tree = segment.tree_from_trajectories(trajectories, depth)
    sep = segment.hierarchical_separation(stacked, pers, ranks, n_perm, seed)
    angles = segment.mean_turning_angles(stacked) if stacked.shape[1] >= 3 else np.zeros(0)

    def level(score):
        if score is None:
            return None
        return {
            "labels": score.labels,
            "members": score.members,
            "silhouette": score.silhouette,
            "baseline_p975": score.baseline_p975,
            "baseline_mean": score.baseline_mean,
            "exceeds_baseline": score.passes,
        }

    return {
        "depth": depth,
        "n_customers": len(trajectories),
        "mean_turning_angle": float(angles.mean()) if angles.size else None,
        "separation": {
            "permutations": n_perm,
            "largest_segment": sep["largest_segment"],
            **{k: level(v) for k, v in sep.items() if k != "largest_segment"},
        },
        "tree": tree.to_dict(),
    }


def cmd_segment(args):
    trajectories = segment.load_trajectories(args.trajectories)
    if not trajectories:
        raise ConfigError("no trajectories to segment")
    doc = segment_document(trajectories, args.depth, args.permutations, args.seed)
    dump_json(doc, args.out, indent=2)
    write_manifest("segment", args.out, _config(args), args.seed, _inputs(args, "trajectories"))


def cmd_plot(args):
    trajectories = segment.load_trajectories(args.trajectories)
    if args.limit:
        trajectories = trajectories[: args.limit]
    projections = [segment.project_pairs(t) for t in trajectories]
    labels = [t.dominance[0] if t.dominance else 0 for t in trajectories]
    segment.emit_plot(projections, labels, args.out, args.title)
    write_manifest("plot", args.out, _config(args), args.seed, _inputs(args, "trajectories"))


def cmd_benchmark(args):
    cube = dataset.load_jsonl(args.data)
    bundle = nncore.load_model(args.model)
    config = transfer.TransferConfig(
        task=args.task, train_size=args.train_size, runs=args.runs,
        validation_size=args.validation_size, master_seed=args.seed, epochs=args.epochs,
        lr=args.lr, patience=args.patience,
    )
    report = transfer.run_benchmark(bundle, cube, config, workers=args.threads)
    dump_json(report.to_dict(), args.out, indent=2)
    write_manifest("benchmark", args.out, _config(args), args.seed, _inputs(args, "data", "model"))


def cmd_run_all(args):
    """gen, score, train, sweep (optional), extract, segment, plot and benchmark into one directory."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    common = ["--seed", str(args.seed), "--threads", str(args.threads)]
    data, model = out / "dataset.jsonl", out / "model.json"
    traj = out / "trajectories.jsonl"
    steps = [
        ["gen", "--customers", str(args.customers), "--out", str(data)],
        ["score", "--data", str(data), "--out", str(out / "personality.jsonl")],
        ["train", "--arch", "rnn-pred", "--data", str(data), "--out", str(model)],
        ["extract", "--model", str(model), "--data", str(data), "--out", str(traj)],
        ["segment", "--trajectories", str(traj), "--permutations", str(args.permutations),
         "--out", str(out / "segments.json")],
        ["plot", "--trajectories", str(traj), "--out", str(out / "trajectories.svg")],
    ]
    for task in transfer.TASKS:
        steps.append(["benchmark", "--model", str(model), "--data", str(data), "--task", task,
                      "--runs", str(args.runs), "--validation-size", str(args.validation_size),
                      "--out", str(out / f"benchmark_{task}.json")])
    for step in steps:
        ns = build_parser().parse_args(step + common)
        ns.func(ns)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"master seed (default: ${SEED_ENV} or {DEFAULT_SEED})")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for sweep and benchmark (outputs do not depend on it)")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--epochs", type=int, default=TRAIN_DEFAULTS.epochs)
    train_opts.add_argument("--lr", type=float, default=TRAIN_DEFAULTS.lr)
    train_opts.add_argument("--batch-size", type=int, default=TRAIN_DEFAULTS.batch_size)
    train_opts.add_argument("--patience", type=int, default=TRAIN_DEFAULTS.patience)
    train_opts.add_argument("--train-fraction", type=float, default=0.8)
    train_opts.add_argument("--target-mode", choices=models.TARGET_MODES, default="trait_vector")
    train_opts.add_argument("--coeffs", help="coefficient table CSV (default: shipped table)")

    parser = argparse.ArgumentParser(prog="spendtraj", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic population")
    p.add_argument("--customers", type=int, default=2000)
    p.add_argument("--years", type=int, default=6)
    p.add_argument("--categories", type=int, default=12)
    p.add_argument("--alpha", type=float, default=1.0, help="personality strength")
    p.add_argument("--sigma", type=float, default=0.05, help="annual noise sd")
    p.add_argument("--rho", type=float, default=0.1, help="life-event probability per year")
    p.add_argument("--delta", type=float, default=3.0, help="life-event logit spike")
    p.add_argument("--coeffs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("score", parents=[common], help="score annual and overall personalities")
    p.add_argument("--data", required=True)
    p.add_argument("--coeffs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", parents=[common, train_opts], help="train one architecture")
    p.add_argument("--arch", required=True, choices=sorted(models.ARCH_ALIASES) + list(models.ARCH_KINDS))
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common, train_opts], help="hidden-size elbow sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--h", default="1..6")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--threshold", type=float, default=models.ELBOW_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("extract", parents=[common], help="hidden-state trajectories")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--coeffs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("segment", parents=[common], help="segment tree and separation scores")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--permutations", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("plot", parents=[common], help="three-panel SVG of trajectory projections")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--limit", type=int, default=0, help="plot only the first N trajectories")
    p.add_argument("--title", default="hidden-state trajectories by dominant trait")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("benchmark", parents=[common], help="frozen-body transfer benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", default="liquidity")
    p.add_argument("--train-size", type=int, default=100)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--validation-size", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=transfer.TransferConfig.epochs)
    p.add_argument("--lr", type=float, default=transfer.TransferConfig.lr)
    p.add_argument("--patience", type=int, default=transfer.TransferConfig.patience)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("run-all", parents=[common], help="the whole chain on defaults")
    p.add_argument("--customers", type=int, default=2000)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--validation-size", type=int, default=1000)
    p.add_argument("--permutations", type=int, default=200)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = default_seed()
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        models.single_blas_thread()
        args.func(args)
    except SpendTrajError as exc:
        print(f"spendtraj {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"spendtraj {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"spendtraj {args.command}: parse error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
