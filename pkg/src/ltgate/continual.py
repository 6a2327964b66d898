"""Sequential-task experiment harness.

Runs the domain-incremental protocol: calibrate thresholds on the first
task's data, train tasks in order from the live weights (no replay, no
freezing, no reinitialization), evaluate on every task's test set each
epoch, and reduce the trajectory to the headline metrics: final
combined accuracy, first-task forgetting in percentage points, last-task
accuracy, and convergence speed. Also hosts the ablation sweep, gate
distribution analysis, and the unsupervised cross-timescale exposure
evaluation.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationConfig, CalibrationReport, calibrate
from .checkpoint import save_checkpoint
from .encoding import EncodingSpec, ImageDataset, SpikeTrainBatch, encode
from .errors import CalibrationError, ParameterError
from .network import Network, forward
from .training import (
    AdamState,
    LossConfig,
    TaskData,
    TrainConfig,
    evaluate,
    firing_stats,
    train_task,
)

_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass
class TaskDef:
    """One task: an image dataset pair plus its presentation encoding."""

    name: str
    train_images: ImageDataset
    test_images: ImageDataset
    encoding: EncodingSpec
    epochs: int
    head_policy: str = "shared_head"

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ParameterError(
                f"task name must be a lowercase identifier, got {self.name!r}"
            )
        if self.epochs < 1:
            raise ParameterError(f"{self.name}: epochs must be >= 1, got {self.epochs}")
        if self.head_policy != "shared_head":
            raise ParameterError(
                f"{self.name}: unsupported head_policy {self.head_policy!r}"
            )


@dataclass
class TaskSchedule:
    """Ordered tasks sharing one label space."""

    tasks: list

    def __post_init__(self):
        if not self.tasks:
            raise ParameterError("schedule needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate task names: {names}")
        classes = [tuple(np.unique(t.train_images.labels)) for t in self.tasks]
        if any(c != classes[0] for c in classes):
            raise ParameterError(
                "all tasks must share one class set (shared output head), got "
                + ", ".join(f"{t.name}={c}" for t, c in zip(self.tasks, classes))
            )

    @property
    def switch_epochs(self) -> list:
        """Cumulative epoch counts marking task boundaries."""
        marks = []
        total = 0
        for t in self.tasks:
            total += t.epochs
            marks.append(total)
        return marks


@dataclass
class ExposureConfig:
    """Unsupervised exposure evaluation settings (runs after one task)."""

    encoding: EncodingSpec
    recalibrate: bool = True
    after_task: int = 0


@dataclass
class GateHistogram:
    """Distribution of effective gate values for one layer."""

    layer: int
    counts: np.ndarray
    edges: np.ndarray
    mass_low: float  # fraction with gamma < 0.2
    mass_mid: float  # fraction with gamma in [0.4, 0.6]
    mass_high: float  # fraction with gamma > 0.8

    @property
    def masses(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def to_rows(self, stage: str) -> list:
        rows = []
        masses = self.masses
        for b in range(len(self.counts)):
            rows.append(
                {
                    "stage": stage,
                    "layer": self.layer,
                    "bin": b,
                    "bin_lo": float(self.edges[b]),
                    "bin_hi": float(self.edges[b + 1]),
                    "count": int(self.counts[b]),
                    "mass": float(masses[b]),
                }
            )
        return rows


def gate_analysis(net: Network, bins: int = 20) -> list:
    """Per-layer histogram of effective gate values over [0, 1]."""
    out = []
    for i in range(len(net.layers)):
        gamma = net.gamma_values(i)
        counts, edges = np.histogram(gamma, bins=bins, range=(0.0, 1.0))
        n = gamma.size
        out.append(
            GateHistogram(
                layer=i,
                counts=counts,
                edges=edges,
                mass_low=float((gamma < 0.2).sum() / n),
                mass_mid=float(((gamma >= 0.4) & (gamma <= 0.6)).sum() / n),
                mass_high=float((gamma > 0.8).sum() / n),
            )
        )
    return out


@dataclass
class ExposureResult:
    """Outcome of one unsupervised exposure evaluation."""

    accuracy: float
    recalibrated: bool
    calibration_converged: bool | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recalibrated": self.recalibrated,
            "calibration_converged": self.calibration_converged,
        }


def unsupervised_exposure_eval(
    net: Network,
    exposure,
    eval_spikes,
    eval_labels,
    recalibrate: bool = True,
    calibration: CalibrationConfig | None = None,
    loss_cfg: LossConfig | None = None,
) -> ExposureResult:
    """Evaluate a trained net on a new timescale without weight updates.

    The only permitted adaptation is per-layer threshold recalibration
    on the unlabeled exposure stream (on a copy; the input net is never
    mutated). With recalibrate=False this reduces to plain zero-shot
    evaluation: the network carries no state between calls, so exposure
    alone cannot change anything. If recalibration cannot reach the
    target band the unrecalibrated network is evaluated instead.
    """
    probe = exposure.spikes if isinstance(exposure, SpikeTrainBatch) else exposure
    work = net
    recalibrated = False
    converged = None
    if recalibrate:
        work = net.clone()
        try:
            report = calibrate(work, probe, calibration)
            recalibrated = True
            converged = report.all_converged
        except CalibrationError:
            work = net.clone()
            converged = False
    stats = evaluate(work, eval_spikes, eval_labels, loss_cfg=loss_cfg)
    return ExposureResult(
        accuracy=stats["accuracy"],
        recalibrated=recalibrated,
        calibration_converged=converged,
    )


@dataclass
class ContinualMetrics:
    """All headline numbers for one sequential run.

    Accuracies are fractions in [0, 1]; forgetting is expressed in
    percentage points (peak minus final, times 100). final_combined_acc
    weights every task's test set equally.
    """

    final_combined_acc: float
    task_a_peak_acc: float
    task_a_final_acc: float
    forgetting: float
    task_b_final_acc: float
    convergence_epochs_task_b: int
    per_task_final_acc: dict
    trajectory: list
    spikes_per_inference: dict
    rate_std_hidden: float
    gate_means: dict
    mode: str
    seed: int
    calibration: dict | None = None
    exposure: dict | None = None
    spike_ratios: dict | None = None

    def __post_init__(self):
        expected = (self.task_a_peak_acc - self.task_a_final_acc) * 100.0
        if abs(self.forgetting - expected) > 1e-12:
            raise ParameterError(
                f"forgetting {self.forgetting} must equal peak-final in points "
                f"({expected})"
            )

    def to_dict(self) -> dict:
        return {
            "final_combined_acc": self.final_combined_acc,
            "task_a_peak_acc": self.task_a_peak_acc,
            "task_a_final_acc": self.task_a_final_acc,
            "forgetting": self.forgetting,
            "task_b_final_acc": self.task_b_final_acc,
            "convergence_epochs_task_b": self.convergence_epochs_task_b,
            "per_task_final_acc": self.per_task_final_acc,
            "trajectory": self.trajectory,
            "spikes_per_inference": self.spikes_per_inference,
            "rate_std_hidden": self.rate_std_hidden,
            "gate_means": self.gate_means,
            "mode": self.mode,
            "seed": self.seed,
            "calibration": self.calibration,
            "exposure": self.exposure,
            "spike_ratios": self.spike_ratios,
        }


def hidden_rate_std(net: Network, spikes, cap: int = 512) -> float:
    """Std across neurons of per-neuron firing rates, averaged over
    hidden layers. The output layer is excluded to mirror where the
    rate regularizer applies."""
    x = spikes.spikes if isinstance(spikes, SpikeTrainBatch) else spikes
    trace = forward(net, x[:cap], record=True)
    hidden = range(len(net.layers) - 1)
    stds = [float(np.std(firing_stats(trace, i)[0])) for i in hidden]
    if not stds:
        return 0.0
    return float(np.mean(stds))


def _gate_means(net: Network) -> list:
    return [float(np.mean(net.gamma_values(i))) for i in range(len(net.layers))]


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def _dump_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _metrics_csv_rows(trajectory, task_names) -> tuple:
    rows = []
    for row in trajectory:
        for name in task_names:
            rows.append(
                {
                    "epoch": row["epoch"],
                    "phase": row["phase"],
                    "train_task": row["train_task"],
                    "epoch_in_task": row["epoch_in_task"],
                    "eval_set": name,
                    "eval_acc": row[f"eval_{name}_acc"],
                    "eval_loss": row[f"eval_{name}_loss"],
                    "train_acc": row["train_acc"],
                    "train_loss": row["train_loss"],
                    "spikes_per_inference": row["spikes_per_inference"],
                }
            )
    columns = [
        "epoch",
        "phase",
        "train_task",
        "epoch_in_task",
        "eval_set",
        "eval_acc",
        "eval_loss",
        "train_acc",
        "train_loss",
        "spikes_per_inference",
    ]
    return rows, columns


def run_continual(
    net: Network,
    schedule: TaskSchedule,
    train_cfg: TrainConfig,
    calibration: CalibrationConfig | None = None,
    calibrate_first: bool = True,
    exposure: ExposureConfig | None = None,
    out_dir=None,
    manifest_extra: dict | None = None,
    config_hash: str = "",
) -> ContinualMetrics:
    """Run the full sequential protocol on one network.

    Training is strictly in schedule order from whatever weights the
    previous phase left behind. Every epoch evaluates on every task's
    test set, so first-task accuracy keeps being sampled while later
    tasks train; the peak is taken over the whole trajectory. When
    out_dir is given, metrics.csv, summary.json, per-layer gate
    histograms, a run manifest, and per-task checkpoints are written
    there; reruns with the same inputs reproduce them byte for byte.
    """
    task_names = [t.name for t in schedule.tasks]
    encoded_train = {
        t.name: encode(t.train_images, t.encoding) for t in schedule.tasks
    }
    eval_sets = {
        t.name: (encode(t.test_images, t.encoding).spikes, t.test_images.labels)
        for t in schedule.tasks
    }

    calib_cfg = calibration if calibration is not None else CalibrationConfig()
    calib_report: CalibrationReport | None = None
    if calibrate_first:
        first = encoded_train[task_names[0]]
        n_probe = min(len(first), calib_cfg.probe_batches * train_cfg.batch_size)
        calib_report = calibrate(net, first.spikes[:n_probe], calib_cfg)

    gate_stages = {"init": gate_analysis(net)}
    gate_means = {"init": _gate_means(net)}
    trajectory = []
    exposure_result: ExposureResult | None = None
    adam = None
    epoch_global = 0

    for phase, task in enumerate(schedule.tasks):
        data = TaskData(
            train_spikes=encoded_train[task.name],
            train_labels=task.train_images.labels,
            eval_sets=eval_sets,
        )
        record, adam = train_task(net, data, task.epochs, train_cfg, adam=adam)
        for row in record.rows:
            epoch_global += 1
            entry = dict(row)
            entry["epoch_in_task"] = entry.pop("epoch")
            entry["epoch"] = epoch_global
            entry["phase"] = phase
            entry["train_task"] = task.name
            trajectory.append(entry)
        stage = f"after_task{phase + 1}"
        gate_stages[stage] = gate_analysis(net)
        gate_means[stage] = _gate_means(net)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                Path(out_dir) / f"checkpoint_task{phase + 1}.ltgc",
                net,
                adam,
                config_hash,
            )
        if exposure is not None and exposure.after_task == phase:
            exp_train = encode(task.train_images, exposure.encoding)
            exp_eval = encode(task.test_images, exposure.encoding)
            exposure_result = unsupervised_exposure_eval(
                net,
                exp_train,
                exp_eval.spikes,
                task.test_images.labels,
                recalibrate=exposure.recalibrate,
                calibration=calib_cfg,
                loss_cfg=train_cfg.loss,
            )

    final_stats = {
        name: evaluate(net, es, el, loss_cfg=train_cfg.loss)
        for name, (es, el) in eval_sets.items()
    }
    name_a = task_names[0]
    name_b = task_names[-1]
    acc_a_series = [row[f"eval_{name_a}_acc"] for row in trajectory]
    task_a_peak = max(acc_a_series)
    task_a_final = acc_a_series[-1]
    task_b_final = trajectory[-1][f"eval_{name_b}_acc"]
    last_phase = len(schedule.tasks) - 1
    phase_b_rows = [r for r in trajectory if r["phase"] == last_phase]
    convergence = next(
        r["epoch_in_task"]
        for r in phase_b_rows
        if r[f"eval_{name_b}_acc"] >= 0.9 * task_b_final - 1e-12
    )
    combined_spikes = np.concatenate([es for es, _ in eval_sets.values()])
    metrics = ContinualMetrics(
        final_combined_acc=float(
            np.mean([final_stats[n]["accuracy"] for n in task_names])
        ),
        task_a_peak_acc=task_a_peak,
        task_a_final_acc=task_a_final,
        forgetting=(task_a_peak - task_a_final) * 100.0,
        task_b_final_acc=task_b_final,
        convergence_epochs_task_b=int(convergence),
        per_task_final_acc={n: final_stats[n]["accuracy"] for n in task_names},
        trajectory=trajectory,
        spikes_per_inference={
            n: final_stats[n]["spikes_per_inference"] for n in task_names
        },
        rate_std_hidden=hidden_rate_std(net, combined_spikes),
        gate_means=gate_means,
        mode=net.mode,
        seed=train_cfg.seed,
        calibration=calib_report.to_dict() if calib_report is not None else None,
        exposure=exposure_result.to_dict() if exposure_result is not None else None,
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows, columns = _metrics_csv_rows(trajectory, task_names)
        _write_csv(out / "metrics.csv", rows, columns)
        _dump_json(out / "summary.json", metrics.to_dict())
        for i in range(len(net.layers)):
            gate_rows = []
            for stage, hists in gate_stages.items():
                gate_rows.extend(hists[i].to_rows(stage))
            _write_csv(
                out / f"gates_layer{i}.csv",
                gate_rows,
                ["stage", "layer", "bin", "bin_lo", "bin_hi", "count", "mass"],
            )
        manifest = {
            "code_version": __version__,
            "config_hash": config_hash,
            "seed": train_cfg.seed,
            "mode": net.mode,
            "tasks": [
                {
                    "name": t.name,
                    "epochs": t.epochs,
                    "encoding": t.encoding.to_dict(),
                    "n_train": len(t.train_images),
                    "n_test": len(t.test_images),
                }
                for t in schedule.tasks
            ],
            "calibration": calib_report.to_dict() if calib_report else None,
            "switch_epochs": schedule.switch_epochs,
            "artifacts": sorted(
                p.name for p in out.iterdir() if p.name != "run_manifest.json"
            ),
        }
        if manifest_extra:
            manifest.update(manifest_extra)
        _dump_json(out / "run_manifest.json", manifest)
    return metrics


ABLATION_MODES = ("ltgate", "single_fast", "single_slow", "no_var_reg")
_BASELINE_MODE = "single_fast"


@dataclass
class AblationTable:
    """ContinualMetrics per ablation cell plus the comparison rows."""

    metrics: dict
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        if not self.rows:
            return
        _write_csv(path, self.rows, list(self.rows[0].keys()))


def ablation_suite(
    build_net,
    schedule: TaskSchedule,
    train_cfg: TrainConfig,
    modes=ABLATION_MODES,
    calibration: CalibrationConfig | None = None,
    exposure: ExposureConfig | None = None,
    out_dir=None,
    config_hash: str = "",
) -> AblationTable:
    """Run the mode sweep with shared seeds and data.

    build_net(mode) must return a freshly initialized network; the same
    seed inside it makes cells differ only in the ablated component.
    no_var_reg reuses the full ltgate architecture with lambda_var
    forced to zero. Spike ratios are reported against the single-fast
    baseline when that mode is part of the sweep.
    """
    results = {}
    for mode in modes:
        if mode == "no_var_reg":
            net = build_net("ltgate")
            cfg = replace(train_cfg, loss=replace(train_cfg.loss, lambda_var=0.0))
        else:
            net = build_net(mode)
            cfg = train_cfg
        sub_dir = None if out_dir is None else Path(out_dir) / mode
        results[mode] = run_continual(
            net,
            schedule,
            cfg,
            calibration=calibration,
            exposure=exposure,
            out_dir=sub_dir,
            config_hash=config_hash,
        )
    task_names = [t.name for t in schedule.tasks]
    baseline = results.get(_BASELINE_MODE)
    rows = []
    for mode in modes:
        m = results[mode]
        if baseline is not None:
            # A silent baseline makes the ratio undefined; report null
            # rather than crash (only reachable on degenerate runs).
            m.spike_ratios = {
                n: (
                    m.spikes_per_inference[n] / baseline.spikes_per_inference[n]
                    if baseline.spikes_per_inference[n] > 0.0
                    else None
                )
                for n in task_names
            }
        row = {
            "mode": mode,
            "final_combined_acc": m.final_combined_acc,
            "task_a_peak_acc": m.task_a_peak_acc,
            "task_a_final_acc": m.task_a_final_acc,
            "forgetting": m.forgetting,
            "task_b_final_acc": m.task_b_final_acc,
            "convergence_epochs_task_b": m.convergence_epochs_task_b,
            "rate_std_hidden": m.rate_std_hidden,
        }
        for n in task_names:
            row[f"spikes_per_inference_{n}"] = m.spikes_per_inference[n]
        if m.spike_ratios is not None:
            for n in task_names:
                row[f"spike_ratio_{n}"] = m.spike_ratios[n]
        if m.exposure is not None:
            row["exposure_acc"] = m.exposure["accuracy"]
        rows.append(row)
    table = AblationTable(metrics=results, rows=rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out_dir) / "ablation_table.csv")
        for mode in modes:
            _dump_json(
                Path(out_dir) / mode / "summary.json", results[mode].to_dict()
            )
    return table
