"""Command line entry point: ``python -m advcnp <command> [options]``.

Exit status is 0 on success, 1 when a run fails and 2 for configuration
errors. Global flags (``--config``, ``--seed``, ``--out``, ``--override``)
may appear before or after the command name.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .datasets import DatasetError, save_dataset
from .diffcore import CheckpointError
from .downstream import FRACTION_GRID, HeadConfig, fraction_sweep, summarize_rows
from .experiments import ExperimentFailed, ExperimentSpec, gradcheck_report, new_run_dir, run_beta_sweep, \
    run_experiment, run_overhead_bench, write_csv
from .training import ConfigError, evaluate_mse, load_model, read_flat_config

GRADCHECK_TOL = 1e-4
TASK_PARAMS = {"amp": "a", "shift": "b"}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat 'key = value' configuration file")
    parser.add_argument("--seed", type=int, default=default, help="run a single seed instead of the list")
    parser.add_argument("--out", default=default, help="output directory (default: runs)")
    parser.add_argument("--override", action="append", default=argparse.SUPPRESS if suppress else [],
                        metavar="KEY=VALUE", help="override one configuration key; repeatable")


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m advcnp", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    add("generate-data", "write the train/validation/test splits of one seed as JSON")
    add("train", "stage-1 training, then stage 2 unless adversarial=false")
    p = add("eval", "test MSE of saved models at the evaluation context fraction")
    p.add_argument("checkpoints", nargs="+", help="model parameter files or training checkpoints")
    p.add_argument("--fraction", type=float, default=None, help="context fraction (default: frac_hi)")
    p = add("downstream", "fit amplitude or shift heads on a frozen model across context fractions")
    p.add_argument("checkpoint", help="model parameter file or training checkpoint")
    p.add_argument("--task", choices=sorted(TASK_PARAMS), default="amp")
    p.add_argument("--fractions", type=_float_list, default=list(FRACTION_GRID))
    p.add_argument("--head-seeds", type=_int_list, default=[0, 1, 2])
    p = add("beta-sweep", "stage-2 runs over a grid of beta sharing each seed's stage 1")
    p.add_argument("--betas", type=_float_list, default=[0.1, 0.3, 0.5, 1.0])
    p = add("bench", "median per-epoch time of stage 2 relative to stage 1")
    p.add_argument("--epochs", type=int, default=5)
    p = add("gradcheck", "analytic vs finite-difference gradients of the training losses")
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    return parser


def resolve_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec()
    if args.config:
        try:
            values = read_flat_config(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        spec = ExperimentSpec.from_flat(values, spec)
    overrides = {}
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if overrides:
        spec = ExperimentSpec.from_flat(overrides, spec)
    extra = {}
    if args.seed is not None:
        extra["seeds"] = str(args.seed)
    if args.out is not None:
        extra["out_dir"] = args.out
    return ExperimentSpec.from_flat(extra, spec) if extra else spec


def _cmd_generate(spec: ExperimentSpec, args) -> int:
    run_dir = new_run_dir(spec.out_dir, spec.experiment_id + "-data", spec.spec_hash())
    for seed in spec.seeds:
        splits = spec.splits(seed)
        for name, ds in (("train", splits.train), ("validation", splits.validation), ("test", splits.test)):
            path = run_dir / f"{spec.family}_seed{seed}_{name}.json"
            save_dataset(ds, path)
            print(f"wrote {path} ({len(ds)} functions)")
    return 0


def _cmd_train(spec: ExperimentSpec, args) -> int:
    result = run_experiment(spec)
    print(f"run directory: {result.run_dir}")
    for row in result.aggregate:
        print(f"{row['model']:>10s}  mse {row['mse_mean']:.5f} +/- {row['mse_std']:.5f}  "
              f"(x10: {row['mse_x10_mean']:.4f})  seeds={row['n_seeds']}")
    return 0


def _cmd_eval(spec: ExperimentSpec, args) -> int:
    fraction = spec.train.frac_hi if args.fraction is None else args.fraction
    rows = []
    for seed in spec.seeds:
        test = spec.splits(seed).test
        for ck in args.checkpoints:
            mse = evaluate_mse(load_model(ck), test, fraction, seed=seed)
            rows.append({"spec_hash": spec.spec_hash(), "checkpoint": ck, "seed": seed, "fraction": fraction,
                         "mse": mse, "mse_x10": 10 * mse})
            print(f"{ck}  seed {seed}  mse {mse:.6f}")
    run_dir = new_run_dir(spec.out_dir, spec.experiment_id + "-eval", spec.spec_hash())
    write_csv(run_dir / "eval.csv", rows)
    return 0


def _cmd_downstream(spec: ExperimentSpec, args) -> int:
    model = load_model(args.checkpoint)
    splits = spec.splits(spec.seeds[0])
    rows = []
    for head_seed in args.head_seeds:
        cfg = HeadConfig(targets=(TASK_PARAMS[args.task],), seed=head_seed)
        for r in fraction_sweep(model, splits.train, splits.test, cfg, args.fractions):
            rows.append({"spec_hash": spec.spec_hash(), "task": args.task, "fraction": r["fraction"],
                         "seed": r["seed"], "mse": r["metric"]})
    run_dir = new_run_dir(spec.out_dir, spec.experiment_id + "-downstream", spec.spec_hash())
    write_csv(run_dir / "downstream.csv", rows, ["spec_hash", "task", "fraction", "seed", "mse"])
    summary = summarize_rows([{**r, "target": args.task, "metric": r["mse"]} for r in rows])
    write_csv(run_dir / "downstream_summary.csv",
              [{"spec_hash": spec.spec_hash(), "task": args.task, "fraction": s["fraction"], "n_seeds": s["n_seeds"],
                "mse_mean": s["mean"], "mse_std": s["std"]} for s in summary])
    for s in summary:
        print(f"fraction {s['fraction']:.2f}  mse {s['mean']:.5f} +/- {s['std']:.5f}")
    return 0


def _cmd_beta(spec: ExperimentSpec, args) -> int:
    result = run_beta_sweep(spec, args.betas)
    print(f"run directory: {result.run_dir}")
    for row in sorted(result.aggregate, key=lambda r: r["beta"]):
        print(f"beta {row['beta']:.2f}  mse {row['mse_mean']:.5f} +/- {row['mse_std']:.5f}")
    return 0


def _cmd_bench(spec: ExperimentSpec, args) -> int:
    report = run_overhead_bench(spec, epochs=args.epochs)
    print(f"stage 1 median epoch {report.stage1_median:.4f}s")
    print(f"stage 2 median epoch {report.stage2_median:.4f}s")
    print(f"relative overhead {report.ratio:.3f}")
    return 0


def _cmd_gradcheck(spec: ExperimentSpec, args) -> int:
    worst = 0.0
    for row in gradcheck_report(spec.seeds[0]):
        ok = row["max_rel_error"] < args.tol
        worst = max(worst, row["max_rel_error"])
        print(f"{row['loss']:<24s} max rel error {row['max_rel_error']:.3e}  {'PASS' if ok else 'FAIL'}")
    return 0 if worst < args.tol else 1


COMMANDS = {"generate-data": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval,
            "downstream": _cmd_downstream, "beta-sweep": _cmd_beta, "bench": _cmd_bench,
            "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = resolve_spec(args)
        return COMMANDS[args.command](spec, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentFailed, DatasetError, CheckpointError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
