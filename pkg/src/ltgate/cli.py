"""Command-line entry point.

Subcommands map one-to-one onto pipeline stages: encode, calibrate,
train, continual, ablate, eval, gates. Exit codes: 0 success, 1
configuration/usage error, 2 runtime or data error. All artifacts land
in the run directory from [run] out_dir or --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .calibration import calibrate
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .config import Experiment, build_experiment, load_config
from .continual import TaskSchedule, ablation_suite, gate_analysis, run_continual
from .encoding import encode, save_spikes
from .errors import ConfigError, LTGateError
from .network import MODES
from .training import evaluate


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this artifact treats
    them as validation failures (exit 1)."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ltgate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **extra):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the INI config file")
        p.add_argument("--out", help="output directory (overrides [run] out_dir)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--mode", choices=sorted(MODES), help="override [model] mode")
        p.add_argument(
            "--no-var-reg",
            action="store_true",
            help="disable the firing-rate regularizer (lambda_var = 0)",
        )
        for flag, kwargs in extra.items():
            p.add_argument(flag, **kwargs)
        return p

    add("encode", "encode datasets into spike files", **{
        "--task": {"help": "encode only this task (default: all)"},
    })
    add("calibrate", "search per-layer thresholds to the target rate")
    add("train", "train a single task from a calibrated start", **{
        "--task": {"help": "task name (default: first in schedule)"},
    })
    add("continual", "run the sequential-task protocol")
    add("ablate", "run the mode sweep (ltgate, single_fast, single_slow, no_var_reg)")
    add("eval", "evaluate a checkpoint on every task's test set", **{
        "--checkpoint": {"required": True, "help": "checkpoint file to load"},
    })
    add("gates", "emit gate-value histograms", **{
        "--checkpoint": {"help": "checkpoint to analyze (default: fresh init)"},
    })
    return parser


def _experiment(args) -> Experiment:
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.mode is not None:
        overrides["model.mode"] = args.mode
    if args.no_var_reg:
        overrides["training.lambda_var"] = 0.0
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    return build_experiment(cfg)


def _out_dir(exp: Experiment) -> Path:
    if exp.out_dir is None:
        raise ConfigError("run.out_dir: required for this command (or pass --out)")
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    return exp.out_dir


def _probe(exp: Experiment):
    first = exp.schedule.tasks[0]
    batch = encode(first.train_images, first.encoding)
    n = min(len(batch), exp.calib_cfg.probe_batches * exp.train_cfg.batch_size)
    return batch.spikes[:n]


def cmd_encode(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    names = [t.name for t in exp.schedule.tasks]
    if args.task is not None:
        if args.task not in names:
            raise ConfigError(f"--task: unknown task {args.task!r}, have {names}")
        names = [args.task]
    for task in exp.schedule.tasks:
        if task.name not in names:
            continue
        for split, ds in (("train", task.train_images), ("test", task.test_images)):
            path = out / f"encoded_{task.name}_{split}.ltgs"
            save_spikes(encode(ds, task.encoding), path)
            print(f"wrote {path} ({len(ds)} samples, {task.encoding.n_steps} steps)")
    return 0


def cmd_calibrate(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    net = exp.fresh_net()
    report = calibrate(net, _probe(exp), exp.calib_cfg)
    with open(out / "calibration_report.json", "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    save_checkpoint(out / "calibrated.ltgc", net, config_hash=exp.hash)
    for row in report.rows:
        print(
            f"layer {row.layer}: v_th={row.v_th:.6g} rate={row.rate:.4f} "
            f"iterations={row.iterations} converged={row.converged}"
        )
    print(f"wrote {out / 'calibration_report.json'} and {out / 'calibrated.ltgc'}")
    return 0


def _print_metrics(metrics) -> None:
    print(f"final_combined_acc={metrics.final_combined_acc:.4f}")
    print(f"task_a_peak_acc={metrics.task_a_peak_acc:.4f}")
    print(f"task_a_final_acc={metrics.task_a_final_acc:.4f}")
    print(f"forgetting={metrics.forgetting:.2f} points")
    print(f"task_b_final_acc={metrics.task_b_final_acc:.4f}")
    print(f"convergence_epochs_task_b={metrics.convergence_epochs_task_b}")
    if metrics.exposure is not None:
        print(f"exposure_acc={metrics.exposure['accuracy']:.4f}")


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    names = [t.name for t in exp.schedule.tasks]
    picked = args.task if args.task is not None else names[0]
    if picked not in names:
        raise ConfigError(f"--task: unknown task {picked!r}, have {names}")
    task = exp.schedule.tasks[names.index(picked)]
    metrics = run_continual(
        exp.fresh_net(),
        TaskSchedule([task]),
        exp.train_cfg,
        calibration=exp.calib_cfg,
        out_dir=out,
        manifest_extra={"config": exp.cfg},
        config_hash=exp.hash,
    )
    _print_metrics(metrics)
    return 0


def cmd_continual(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    metrics = run_continual(
        exp.fresh_net(),
        exp.schedule,
        exp.train_cfg,
        calibration=exp.calib_cfg,
        exposure=exp.exposure,
        out_dir=out,
        manifest_extra={"config": exp.cfg},
        config_hash=exp.hash,
    )
    _print_metrics(metrics)
    print(f"artifacts in {out}")
    return 0


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    table = ablation_suite(
        exp.build_net,
        exp.schedule,
        exp.train_cfg,
        calibration=exp.calib_cfg,
        exposure=exp.exposure,
        out_dir=out,
        config_hash=exp.hash,
    )
    for row in table.rows:
        print(
            f"{row['mode']}: final={row['final_combined_acc']:.4f} "
            f"forgetting={row['forgetting']:.2f} "
            f"rate_std={row['rate_std_hidden']:.4f}"
        )
    print(f"wrote {out / 'ablation_table.csv'}")
    return 0


def _restore_net(exp: Experiment, checkpoint_path):
    net = exp.fresh_net()
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.config_hash and ckpt.config_hash != exp.hash:
        print(
            "warning: checkpoint was produced under a different config",
            file=sys.stderr,
        )
    apply_checkpoint(net, ckpt)
    return net


def cmd_eval(args) -> int:
    exp = _experiment(args)
    net = _restore_net(exp, args.checkpoint)
    results = {}
    for task in exp.schedule.tasks:
        spikes = encode(task.test_images, task.encoding).spikes
        stats = evaluate(net, spikes, task.test_images.labels, loss_cfg=exp.train_cfg.loss)
        results[task.name] = {
            "accuracy": stats["accuracy"],
            "loss": stats["loss"],
            "spikes_per_inference": stats["spikes_per_inference"],
        }
    results["combined_accuracy"] = sum(
        r["accuracy"] for r in results.values()
    ) / len(results)
    print(json.dumps(results, sort_keys=True, indent=2))
    if exp.out_dir is not None:
        exp.out_dir.mkdir(parents=True, exist_ok=True)
        with open(exp.out_dir / "eval.json", "w") as f:
            json.dump(results, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def cmd_gates(args) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    if args.checkpoint is not None:
        net = _restore_net(exp, args.checkpoint)
        stage = "checkpoint"
    else:
        net = exp.fresh_net()
        stage = "init"
    for hist in gate_analysis(net):
        rows = hist.to_rows(stage)
        path = out / f"gates_layer{hist.layer}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        print(
            f"layer {hist.layer}: mass<0.2={hist.mass_low:.3f} "
            f"mass[0.4,0.6]={hist.mass_mid:.3f} mass>0.8={hist.mass_high:.3f} "
            f"-> {path}"
        )
    return 0


_COMMANDS = {
    "encode": cmd_encode,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "continual": cmd_continual,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gates": cmd_gates,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (LTGateError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
