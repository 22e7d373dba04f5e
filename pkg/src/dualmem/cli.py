"""Command-line entry point.

Subcommands: run (train + aggregate), sweep (grid search with a validation
split), report (render saved records), analyze (metrics on a checkpoint),
datagen (stream manifests). The MNIST directory comes from --data-root or
the DUALMEM_DATA environment variable (default ./data/mnist).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .harness import (
    ARCHITECTURE,
    ExperimentConfig,
    emit_report,
    load_checkpoint,
    load_records,
    run_experiment,
    sweep,
)
from .learners import LEARNERS, make_learner
from .metrics import (
    calibration,
    perturbation_curve,
    task_probabilities,
    plot_analysis_svg,
    write_calibration_csv,
    write_curve_csv,
)
from .streams import BUILDERS, build_stream, load_mnist

PROTOCOLS = sorted(BUILDERS) + ["gcil-uniform", "gcil-longtail"]
LEARNER_TAGS = sorted(LEARNERS) + ["joint"]


def _data_root(args) -> str:
    return args.data_root or os.environ.get("DUALMEM_DATA", "./data/mnist")


def _add_common(p):
    p.add_argument("--data-root", default=None,
                   help="MNIST IDX directory (default: $DUALMEM_DATA or ./data/mnist)")
    p.add_argument("--out", default="./results", help="output directory")


def _add_run_args(p):
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--learner", required=True, choices=LEARNER_TAGS)
    p.add_argument("--buffer", type=int, nargs="+", default=[500])
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lam", type=float, default=None, help="consistency loss weight")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--memory-batch-size", type=int, default=None)
    p.add_argument("--alpha-p", type=float, default=None)
    p.add_argument("--alpha-s", type=float, default=None)
    p.add_argument("--rate-p", type=float, default=None)
    p.add_argument("--rate-s", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-cadence", choices=["task", "final"], default="task")
    p.add_argument("--checkpoint-dir", default=None)


def _config_from_args(args) -> ExperimentConfig:
    pair = None
    if any(v is not None for v in (args.alpha_p, args.alpha_s, args.rate_p, args.rate_s)):
        if None in (args.alpha_p, args.alpha_s, args.rate_p, args.rate_s):
            raise SystemExit("override all of --alpha-p/--alpha-s/--rate-p/--rate-s or none")
        pair = {"alpha_P": args.alpha_p, "alpha_S": args.alpha_s,
                "rate_P": args.rate_p, "rate_S": args.rate_s}
    return ExperimentConfig(
        protocol=args.protocol,
        learner=args.learner,
        buffer_sizes=args.buffer,
        seeds=[args.base_seed + i for i in range(args.n_seeds)],
        lr=args.lr, lam=args.lam,
        batch_size=args.batch_size,
        memory_batch_size=args.memory_batch_size,
        memory_pair=pair,
        epochs_per_task=args.epochs,
        eval_cadence=args.eval_cadence,
        output_dir=args.out,
        checkpoint_dir=args.checkpoint_dir,
    )


def cmd_run(args) -> int:
    data = load_mnist(_data_root(args))
    config = _config_from_args(args)
    records = run_experiment(config, data)
    paths = emit_report(records, args.out)
    for r in records:
        print(f"{r.protocol} {r.learner} buffer={r.buffer_size}: {r.cell()}")
    print(f"report written to {paths['txt']}")
    return 0


def cmd_sweep(args) -> int:
    data = load_mnist(_data_root(args))
    config = _config_from_args(args)
    grid = {}
    for spec in args.param:
        name, _, values = spec.partition("=")
        if not values:
            raise SystemExit(f"bad --param {spec!r}; expected name=v1,v2,...")
        grid[name] = [float(v) for v in values.split(",")]
    points = sweep(config, grid, data, val_frac=args.val_frac)
    rows = []
    for p in points:
        if p.record is None:
            print(f"skipped {p.params}: {p.skipped_reason}")
        else:
            print(f"{p.params}: val={p.validation_mean:.2f} test={p.record.cell()}")
            rows.append(p.record)
    if rows:
        emit_report(rows, args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.json", "w") as fh:
        json.dump([
            {"params": p.params,
             "validation_mean": p.validation_mean,
             "test_mean": None if p.record is None else p.record.mean,
             "skipped_reason": p.skipped_reason}
            for p in points
        ], fh, indent=1)
    return 0


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        records.extend(load_records(path))
    paths = emit_report(records, args.out)
    with open(paths["txt"]) as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_analyze(args) -> int:
    data = load_mnist(_data_root(args))
    ckpt = load_checkpoint(args.checkpoint)
    stream = build_stream(ckpt["protocol"], data, int(ckpt["seed"]))
    config = ExperimentConfig(protocol=ckpt["protocol"], learner=ckpt["learner"],
                              buffer_sizes=[int(ckpt["buffer_size"])],
                              seeds=[int(ckpt["seed"])])
    lconfig = config.learner_config(int(ckpt["buffer_size"]))
    learner = make_learner(ckpt["learner"], ARCHITECTURE, lconfig, int(ckpt["seed"]))
    learner.set_state(ckpt["learner_state"])
    net = learner.component_network(args.component or learner.default_component)

    if stream.shared_test is not None:
        test_x, test_y = stream.shared_test_set()
    else:
        parts = [t.test_set() for t in stream.tasks]
        test_x = np.concatenate([x for x, _ in parts])
        test_y = np.concatenate([y for _, y in parts])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calib = calibration(net, test_x, test_y)
    write_calibration_csv(out / "calibration.csv", calib)
    probs = task_probabilities(net, stream)
    with open(out / "task_probabilities.json", "w") as fh:
        json.dump({"task_probabilities": probs.tolist()}, fh, indent=1)

    # perturbation probe runs on a training subset
    rng = np.random.default_rng(0)
    task0 = stream.tasks[0]
    idx = rng.choice(task0.n_train, size=min(args.probe_size, task0.n_train), replace=False)
    curve = perturbation_curve(net, task0.train_rows(idx), task0.train_y[idx],
                               draws_per_sigma=args.draws, seed=0, mode=args.noise_mode)
    write_curve_csv(out / "perturbation.csv", curve)
    if args.svg:
        plot_analysis_svg(out, curves={ckpt["learner"]: curve},
                          calib={ckpt["learner"]: calib},
                          task_probs={ckpt["learner"]: probs})
    print(f"ECE={calib.ece:.4f}; analysis written to {out}")
    return 0


def cmd_datagen(args) -> int:
    data = load_mnist(_data_root(args))
    stream = build_stream(args.protocol, data, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"manifest_{args.protocol}_seed{args.seed}.json"
    with open(path, "w") as fh:
        json.dump(stream.manifest(), fh, indent=1)
    print(f"manifest written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmem")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train an experiment over seeds and report")
    _add_common(p)
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="hyperparameter grid with validation split")
    _add_common(p)
    _add_run_args(p)
    p.add_argument("--param", action="append", required=True,
                   help="grid axis, e.g. --param lam=0.5,1.0 --param rate_P=0.9,1.0")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render saved record files into tables")
    p.add_argument("records", nargs="+", help="records.json files")
    p.add_argument("--out", default="./results")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze", help="calibration / task-probability / perturbation "
                                       "metrics for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--component", default=None,
                   help="model component to analyze (default: the learner's inference model)")
    p.add_argument("--probe-size", type=int, default=2000)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--noise-mode", choices=["absolute", "relative"], default="absolute")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("datagen", help="emit a stream manifest for audit")
    _add_common(p)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_datagen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
