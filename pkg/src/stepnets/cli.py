"""Experiment runner.

`stepnets train` reproduces the experimental protocol end to end: defaults
are depth 7, hidden width 100, horizon 1, batch 100, 200 epochs, alpha
0.01, epsilon 0.01, step sizes initialized to horizon/(L-1). Each run
writes into its output directory:

  metrics.csv    one row per iteration: losses, per-epoch test accuracy,
                 live layer count (wall_time_ms filled only with --timing,
                 since timings break byte-reproducibility)
  tau.csv        step-size snapshots; one column per initial layer, a
                 pruned column stops emitting values at the prune iteration
  checkpoint.npz final parameters (bit-exact round trip)
  spec.resolved  every effective hyperparameter, including the seed
  summary.json   final/best accuracy, prune events, measured wall time
  *.png          rendered figures (disable with --no-figures)

`stepnets compare` tabulates finished runs; `stepnets plot` re-renders the
figures for an existing run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import __version__
from .data import DATA_DIR_ENV, load_dataset
from .network import save_checkpoint
from .objective import Regularization
from .trainer import ConfigError, TrainConfig, TrainResult, run_training

REG_CHOICES = ("none", "l1", "horizon", "l1+horizon", "final-tau")

TRAIN_DEFAULTS = {
    "arch": "resnet",
    "dataset": "mnist",
    "reg": "none",
    "fixed_tau": False,
    "prune": False,
    "epsilon": 0.01,
    "alpha": 0.01,
    "horizon": 1.0,
    "gamma": 0.5,
    "lr": 0.05,
    "batch": 100,
    "epochs": 200,
    "seed": 0,
    "depth": 7,
    "width": 100,
    "data_dir": None,
    "out": None,
    "subset": None,
    "label": None,
    "tau_every": 20,
    "eval_every": None,
    "prune_interval": None,
    "projection_floor": 1e-4,
    "timing": False,
    "figures": True,
    "standardize": False,
    "shuffle_partition": False,
}

METRICS_COLUMNS = (
    "iteration",
    "epoch",
    "train_loss_total",
    "train_loss_data",
    "penalty",
    "test_accuracy",
    "active_layers",
    "wall_time_ms",
)


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved single-seed experiment."""

    train: TrainConfig
    dataset: str
    subset: int | None
    data_dir: str | None
    out_dir: str
    label: str
    tau_every: int
    timing: bool
    figures: bool
    standardize: bool

    def resolved(self) -> dict:
        payload = {
            "stepnets_version": __version__,
            "dataset": self.dataset,
            "subset": self.subset,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "label": self.label,
            "tau_every": self.tau_every,
            "timing": self.timing,
            "figures": self.figures,
            "standardize": self.standardize,
        }
        train = asdict(self.train)
        train["reg"] = {"kind": self.train.reg.kind, "alpha": self.train.reg.alpha, "horizon": self.train.reg.horizon}
        payload["train"] = train
        return payload


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepnets",
        description="Train residual / fractional networks with learnable layer step sizes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run one experiment (or one per seed with --seeds)")
    tr.add_argument("--config", help="JSON file with defaults; explicit flags override it")
    tr.add_argument("--arch", choices=("resnet", "fractional"))
    tr.add_argument("--dataset", choices=("mnist", "fashion"))
    tr.add_argument("--reg", choices=REG_CHOICES)
    tr.add_argument("--fixed-tau", action="store_true", default=None,
                    help="freeze the step sizes at their initialization")
    tr.add_argument("--prune", action="store_true", default=None,
                    help="enable adaptive layer pruning (resnet only)")
    tr.add_argument("--epsilon", type=float, help="prune threshold factor")
    tr.add_argument("--alpha", type=float, help="l1 penalty weight")
    tr.add_argument("--horizon", type=float, metavar="T", help="time horizon")
    tr.add_argument("--gamma", type=float, help="fractional order in (0, 1]")
    tr.add_argument("--lr", type=float, help="learning rate")
    tr.add_argument("--batch", type=int, help="mini-batch size")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--seeds", help="comma-separated seeds; runs sibling directories")
    tr.add_argument("--depth", type=int, help="number of layer functions L")
    tr.add_argument("--width", type=int, help="hidden width")
    tr.add_argument("--data-dir", help=f"dataset directory (default $%s or ./data)" % DATA_DIR_ENV)
    tr.add_argument("--out", help="output directory (default runs/<label>)")
    tr.add_argument("--subset", type=int, metavar="N", help="truncate the training set to N samples")
    tr.add_argument("--label", help="run label used for the default output directory")
    tr.add_argument("--tau-every", type=int, help="step-size snapshot cadence in iterations")
    tr.add_argument("--eval-every", type=int, help="test evaluation cadence (default: each epoch)")
    tr.add_argument("--prune-interval", type=int, help="prune check cadence (default: each epoch)")
    tr.add_argument("--projection-floor", type=float, help="positivity floor for fractional runs")
    tr.add_argument("--timing", action="store_true", default=None,
                    help="fill wall_time_ms in metrics.csv (breaks byte-reproducibility)")
    tr.add_argument("--no-figures", dest="figures", action="store_false", default=None)
    tr.add_argument("--standardize", action="store_true", default=None,
                    help="standardize features by training mean/std instead of plain 1/255")
    tr.add_argument("--shuffle-partition", action="store_true", default=None,
                    help="epoch-shuffled batch partition instead of fresh uniform draws")

    cp = sub.add_parser("compare", help="summarize two or more finished runs")
    cp.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    cp.add_argument("--threshold", type=float, default=0.9,
                    help="accuracy threshold for iterations-to-reach (default 0.9)")

    pl = sub.add_parser("plot", help="render figures for an existing run directory")
    pl.add_argument("run", help="run directory")
    return parser


def _flatten_resolved(resolved: dict) -> dict:
    """Turn a run's spec.resolved back into flat option values, so
    `--config RUN/spec.resolved` reproduces the run."""
    train = resolved["train"]
    flat = {
        "arch": train["arch"],
        "depth": train["depth"],
        "width": train["hidden_width"],
        "horizon": train["horizon"],
        "gamma": train["gamma"],
        "lr": train["learning_rate"],
        "batch": train["batch_size"],
        "epochs": train["epochs"],
        "seed": train["seed"],
        "reg": train["reg"]["kind"],
        "alpha": train["reg"]["alpha"],
        "fixed_tau": train["fixed_tau"],
        "prune": train["prune_enabled"],
        "epsilon": train["prune_epsilon"],
        "projection_floor": train["projection_floor"],
        "prune_interval": train["prune_check_interval"],
        "eval_every": train["eval_every"],
        "shuffle_partition": train["shuffle_partition"],
        "dataset": resolved["dataset"],
        "subset": resolved["subset"],
        "data_dir": resolved["data_dir"],
        "out": resolved["out_dir"],
        "label": resolved["label"],
        "tau_every": resolved["tau_every"],
        "timing": resolved["timing"],
        "figures": resolved["figures"],
        "standardize": resolved["standardize"],
    }
    return flat


def _merge_options(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    merged = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if "train" in file_values:  # a previous run's spec.resolved
            try:
                file_values = _flatten_resolved(file_values)
            except KeyError as exc:
                parser.error(f"{args.config} looks like a resolved spec but lacks key {exc}")
        unknown = set(file_values) - set(TRAIN_DEFAULTS)
        if unknown:
            parser.error(f"unknown config file keys: {sorted(unknown)}")
        merged.update({k: v for k, v in file_values.items() if v is not None})
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _regularization(options: dict) -> Regularization:
    kind = options["reg"]
    if kind == "none":
        return Regularization.none()
    if kind == "l1":
        return Regularization.l1(options["alpha"])
    if kind == "horizon":
        return Regularization.time_horizon(options["horizon"])
    if kind == "l1+horizon":
        return Regularization.l1_plus_horizon(options["alpha"], options["horizon"])
    return Regularization.final_tau(options["horizon"])


def parse_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> ExperimentSpec:
    """Resolve flags > config file > defaults into one ExperimentSpec."""
    options = _merge_options(args, parser)
    try:
        reg = _regularization(options)
        train = TrainConfig(
            arch=options["arch"],
            depth=options["depth"],
            hidden_width=options["width"],
            horizon=options["horizon"],
            gamma=options["gamma"],
            learning_rate=options["lr"],
            batch_size=options["batch"],
            epochs=options["epochs"],
            seed=options["seed"],
            reg=reg,
            fixed_tau=bool(options["fixed_tau"]),
            prune_enabled=bool(options["prune"]),
            prune_epsilon=options["epsilon"],
            projection_floor=options["projection_floor"],
            prune_check_interval=options["prune_interval"],
            eval_every=options["eval_every"],
            shuffle_partition=bool(options["shuffle_partition"]),
        )
        train.validate()
    except (ConfigError, ValueError) as exc:
        parser.error(str(exc))
    if options["subset"] is not None and options["subset"] < train.batch_size:
        parser.error(f"--subset {options['subset']} is smaller than the batch size {train.batch_size}")
    if options["tau_every"] < 1:
        parser.error(f"--tau-every must be >= 1, got {options['tau_every']}")
    label = options["label"] or _default_label(options)
    out_dir = options["out"] or str(Path("runs") / label)
    return ExperimentSpec(
        train=train,
        dataset=options["dataset"],
        subset=options["subset"],
        data_dir=options["data_dir"],
        out_dir=out_dir,
        label=label,
        tau_every=options["tau_every"],
        timing=bool(options["timing"]),
        figures=bool(options["figures"]),
        standardize=bool(options["standardize"]),
    )


def _default_label(options: dict) -> str:
    parts = [options["arch"], options["dataset"], options["reg"].replace("+", "-")]
    if options["fixed_tau"]:
        parts.append("fixed")
    if options["prune"]:
        parts.append("prune")
    parts.append(f"s{options['seed']}")
    return "-".join(parts)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_metrics_csv(path, result: TrainResult, timing: bool) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for rec in result.records:
            writer.writerow(
                [
                    rec.iteration,
                    rec.epoch,
                    _fmt(rec.loss.total),
                    _fmt(rec.loss.data_loss),
                    _fmt(rec.loss.penalty),
                    _fmt(rec.test_accuracy) if rec.test_accuracy is not None else "",
                    rec.active_layers,
                    _fmt(rec.wall_time_ms) if timing else "",
                ]
            )


def write_tau_csv(path, result: TrainResult, tau_every: int) -> None:
    """Snapshot rows at iteration 0, every tau_every iterations, at every
    prune event and at the end. Columns are the ORIGINAL layer indices;
    a pruned column goes empty from its prune iteration onward."""
    n_original = result.initial_tau.size
    total = result.records[-1].iteration if result.records else 0
    wanted = {0, total}
    wanted.update(range(tau_every, total + 1, tau_every))
    wanted.update(ev.iteration for ev in result.prune_events)

    events = sorted(result.prune_events, key=lambda ev: ev.iteration)
    alive = list(range(n_original))
    next_event = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + [f"tau{i}" for i in range(n_original)])
        if 0 in wanted:
            writer.writerow([0] + [_fmt(v) for v in result.initial_tau])
        for rec in result.records:
            while next_event < len(events) and events[next_event].iteration <= rec.iteration:
                alive = list(events[next_event].remaining_original)
                next_event += 1
            if rec.iteration not in wanted:
                continue
            row = [""] * n_original
            for position, original in enumerate(alive):
                row[original] = _fmt(rec.tau_snapshot[position])
            writer.writerow([rec.iteration] + row)


def run_experiment(spec: ExperimentSpec) -> int:
    """Run one experiment and write all artifacts into spec.out_dir."""
    train_set, test_set = load_dataset(
        spec.dataset, spec.data_dir, subset=spec.subset, standardize=spec.standardize
    )
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "spec.resolved", "w") as fh:
        json.dump(spec.resolved(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    result = run_training(spec.train, train_set, test_set)

    write_metrics_csv(out / "metrics.csv", result, timing=spec.timing)
    write_tau_csv(out / "tau.csv", result, tau_every=spec.tau_every)
    save_checkpoint(out / "checkpoint.npz", result.params)

    accuracies = [r.test_accuracy for r in result.records if r.test_accuracy is not None]
    summary = {
        "label": spec.label,
        "iterations": result.records[-1].iteration if result.records else 0,
        "iters_per_epoch": result.iters_per_epoch,
        "final_test_accuracy": accuracies[-1] if accuracies else None,
        "best_test_accuracy": max(accuracies) if accuracies else None,
        "final_tau": [float(v) for v in result.params.tau],
        "final_tau_sum": float(result.params.tau.sum()),
        "final_depth": result.params.arch.depth,
        "prune_events": [
            {
                "iteration": ev.iteration,
                "removed_original": ev.removed_original,
                "remaining_original": ev.remaining_original,
            }
            for ev in result.prune_events
        ],
        "total_wall_ms": result.total_wall_ms,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if spec.figures:
        from .plots import render_run_figures

        render_run_figures(out)

    acc_text = f"{accuracies[-1]:.4f}" if accuracies else "n/a"
    print(
        f"[{spec.label}] {summary['iterations']} iterations, "
        f"final test accuracy {acc_text}, artifacts in {out}"
    )
    return 0


class CompareError(ValueError):
    """A run directory's artifacts are missing or malformed."""


def _load_metrics(run_dir: Path) -> dict:
    path = run_dir / "metrics.csv"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CompareError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise CompareError(f"{path} has no data rows")
    try:
        accuracy = [
            (int(r["iteration"]), float(r["test_accuracy"]))
            for r in rows
            if r["test_accuracy"] not in ("", None)
        ]
        active = int(rows[-1]["active_layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CompareError(f"{path} is malformed: {exc}") from None
    return {"accuracy": accuracy, "final_active_layers": active}


def _final_tau_sum(run_dir: Path) -> float:
    path = run_dir / "tau.csv"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CompareError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise CompareError(f"{path} has no snapshot rows")
    last = rows[-1][1:]
    return float(sum(float(v) for v in last if v != ""))


def compare_runs(run_dirs, threshold: float = 0.9) -> list[dict]:
    """Per run: final/best accuracy, iterations to reach the threshold,
    final step-size sum and final layer count."""
    if len(run_dirs) < 2:
        raise CompareError(f"need at least 2 run directories to compare, got {len(run_dirs)}")
    table = []
    for run in run_dirs:
        run = Path(run)
        metrics = _load_metrics(run)
        acc = metrics["accuracy"]
        reached = [it for it, a in acc if a >= threshold]
        table.append(
            {
                "run": run.name,
                "final_accuracy": acc[-1][1] if acc else float("nan"),
                "best_accuracy": max(a for _, a in acc) if acc else float("nan"),
                "iters_to_threshold": reached[0] if reached else None,
                "final_tau_sum": _final_tau_sum(run),
                "final_active_layers": metrics["final_active_layers"],
            }
        )
    return table


def _print_table(table: list[dict], threshold: float) -> None:
    headers = ["run", "final acc", "best acc", f"iters to {threshold:.0%}", "sum tau", "layers"]
    rows = [
        [
            row["run"],
            f"{row['final_accuracy']:.4f}",
            f"{row['best_accuracy']:.4f}",
            str(row["iters_to_threshold"]) if row["iters_to_threshold"] is not None else "never",
            f"{row['final_tau_sum']:.4f}",
            str(row["final_active_layers"]),
        ]
        for row in table
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            seeds = None
            if getattr(args, "seeds", None):
                try:
                    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
                except ValueError:
                    parser.error(f"--seeds must be comma-separated integers, got {args.seeds!r}")
            spec = parse_config(args, parser)
            if seeds is None:
                return run_experiment(spec)
            status = 0
            for seed in seeds:
                seeded = replace(
                    spec,
                    train=replace(spec.train, seed=seed),
                    out_dir=f"{spec.out_dir}-s{seed}",
                    label=f"{spec.label}-s{seed}",
                )
                status |= run_experiment(seeded)
            return status
        if args.command == "compare":
            table = compare_runs(args.runs, threshold=args.threshold)
            _print_table(table, args.threshold)
            return 0
        if args.command == "plot":
            from .plots import render_run_figures

            for path in render_run_figures(args.run):
                print(path)
            return 0
        parser.error(f"unknown command {args.command!r}")
    except (CompareError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
