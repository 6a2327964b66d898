"""Experiment configuration: INI parsing, validation, materialization.

The config file is a flat, typed key-value format with sections, chosen
so experiment records stay diffable and parse without dependencies.
Unknown sections or keys are rejected, every value is type-checked with
its field path in the error message, and semantic constraints are
enforced by the owning module's own validators before any compute
starts. A canonical JSON rendering of the resolved config is hashed
into run manifests and checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationConfig
from .continual import ExposureConfig, TaskDef, TaskSchedule
from .encoding import EncodingSpec, load_idx, make_toy_dataset
from .errors import ConfigError, LTGateError
from .network import MODES, build_network
from .training import LossConfig, TrainConfig

# (type, default); default REQUIRED means the key must be present.
REQUIRED = object()

_ENCODING_KEYS = {
    "frequency_hz": ("float", REQUIRED),
    "duration_ms": ("float", 50.0),
    "dt_ms": ("float", 1.0),
    "max_rate_hz": ("float", None),
    "seed": ("int", None),
}

_SCHEMA = {
    "data": {
        "source": ("str", "toy"),
        "seed": ("int", None),
        "classes": ("int", 5),
        "n_train_per_class": ("int", 200),
        "n_test_per_class": ("int", 40),
        "feature_dim": ("int", 64),
        "separation": ("float", 3.0),
        "noise": ("float", 0.1),
        "image_hw": ("str", ""),
        "train_images": ("str", ""),
        "train_labels": ("str", ""),
        "test_images": ("str", ""),
        "test_labels": ("str", ""),
        "limit_train": ("int", 0),
        "limit_test": ("int", 0),
    },
    "model": {
        "layers": ("str", "dense:48, dense:5"),
        "tau_fast_ms": ("float", 5.0),
        "tau_slow_ms": ("float", 50.0),
        "mode": ("str", "ltgate"),
        "surrogate_slope": ("float", 1.0),
        "spike_condition": ("str", "combined"),
        "gamma_init": ("str", "0.4, 0.6"),
        "weight_scale": ("float", 1.0),
        "v_th_init": ("float", 1.0),
        "detach_reset": ("bool", False),
    },
    "training": {
        "lr": ("float", 0.001),
        "batch_size": ("int", 32),
        "lambda_var": ("float", 0.01),
        "mu_star": ("float", 0.02),
        "sigma_star": ("float", 0.015),
    },
    "calibration": {
        "target_rate": ("float", 0.02),
        "band_lo": ("float", 0.015),
        "band_hi": ("float", 0.025),
        "max_iters": ("int", 30),
        "probe_batches": ("int", 3),
        "v_lo": ("float", 1e-3),
        "v_hi": ("float", 1e3),
    },
    "schedule": {
        "tasks": ("str", "fast, slow"),
        "epochs_per_task": ("str", "10"),
        "exposure": ("bool", False),
        "exposure_after_task": ("int", 0),
        "exposure_recalibrate": ("bool", True),
    },
    "run": {
        "out_dir": ("str", ""),
        "seed": ("int", 0),
    },
}

_BOOL_WORDS = {
    "1": True, "true": True, "yes": True, "on": True,
    "0": False, "false": False, "no": False, "off": False,
}


def _parse_value(path: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw  # already typed (override values)
    text = raw.strip()
    if kind == "str":
        return text
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{path}: expected int, got {raw!r}") from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{path}: expected float, got {raw!r}") from None
    if kind == "bool":
        try:
            return _BOOL_WORDS[text.lower()]
        except KeyError:
            raise ConfigError(f"{path}: expected bool, got {raw!r}") from None
    raise AssertionError(f"unhandled kind {kind}")


def _section_schema(section: str) -> dict | None:
    if section in _SCHEMA:
        return _SCHEMA[section]
    if section.startswith("encoding."):
        return _ENCODING_KEYS
    return None


def load_config(path, overrides: dict | None = None) -> dict:
    """Parse an INI file into a fully typed nested dict.

    overrides maps dotted paths ("run.seed") to replacement values and
    is applied before defaults are resolved, so command-line flags obey
    the same validation as file contents.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if parser.defaults():
        raise ConfigError("unknown section: DEFAULT")

    raw: dict = {}
    for section in parser.sections():
        schema = _section_schema(section)
        if schema is None:
            raise ConfigError(f"unknown section: {section}")
        raw[section] = dict(parser.items(section))
        for key in raw[section]:
            if key not in schema:
                raise ConfigError(f"unknown key: {section}.{key}")

    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        schema = _section_schema(section)
        if schema is None or key not in schema:
            raise ConfigError(f"unknown key: {dotted}")
        raw.setdefault(section, {})[key] = value

    cfg: dict = {}
    for section in sorted(set(raw) | set(_SCHEMA)):
        schema = _section_schema(section)
        values = raw.get(section, {})
        out = {}
        for key, (kind, default) in schema.items():
            if key in values:
                out[key] = _parse_value(f"{section}.{key}", kind, values[key])
            elif default is REQUIRED:
                raise ConfigError(f"missing required key: {section}.{key}")
            else:
                out[key] = default
        cfg[section] = out
    return cfg


def config_hash(cfg: dict) -> str:
    """Digest of everything that affects results. The output directory
    is excluded so relocated runs of one experiment share a hash."""
    canon = {s: dict(v) for s, v in cfg.items()}
    canon["run"].pop("out_dir", None)
    return hashlib.sha256(
        json.dumps(canon, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def _parse_layers(text: str) -> list:
    descs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        kind = parts[0]
        try:
            args = [int(p) for p in parts[1:]]
        except ValueError:
            raise ConfigError(
                f"model.layers: non-integer size in {item!r}"
            ) from None
        if kind == "dense" and len(args) == 1:
            descs.append(("dense", args[0]))
        elif kind == "conv2d" and len(args) == 3:
            descs.append(("conv2d", args[0], args[1], args[2]))
        else:
            raise ConfigError(
                f"model.layers: expected 'dense:N' or 'conv2d:C:K:S', got {item!r}"
            )
    if not descs:
        raise ConfigError("model.layers: at least one layer is required")
    return descs


def _parse_pair(path: str, text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{path}: expected two comma-separated values, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"{path}: expected floats, got {text!r}") from None


def _parse_hw(text: str) -> tuple | None:
    if not text:
        return None
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"data.image_hw: expected 'H, W', got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"data.image_hw: expected ints, got {text!r}") from None


def _task_names(cfg: dict) -> list:
    names = [t.strip() for t in cfg["schedule"]["tasks"].split(",") if t.strip()]
    if not names:
        raise ConfigError("schedule.tasks: at least one task name is required")
    return names


def _epochs_list(cfg: dict, n_tasks: int) -> list:
    parts = [p.strip() for p in cfg["schedule"]["epochs_per_task"].split(",")]
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(
            f"schedule.epochs_per_task: expected ints, got "
            f"{cfg['schedule']['epochs_per_task']!r}"
        ) from None
    if len(values) == 1:
        values = values * n_tasks
    if len(values) != n_tasks:
        raise ConfigError(
            f"schedule.epochs_per_task: got {len(values)} entries for "
            f"{n_tasks} tasks"
        )
    return values


def _wrap(path: str, fn):
    """Run a domain-module constructor, prefixing errors with the field path."""
    try:
        return fn()
    except LTGateError as e:
        raise ConfigError(f"{path}: {e}") from None


def _encoding_spec(cfg: dict, name: str, seed_offset: int) -> EncodingSpec:
    section = f"encoding.{name}"
    if section not in cfg:
        raise ConfigError(f"missing required section: {section}")
    enc = cfg[section]
    seed = enc["seed"]
    if seed is None:
        seed = cfg["run"]["seed"] + seed_offset
    return _wrap(
        section,
        lambda: EncodingSpec(
            frequency_hz=enc["frequency_hz"],
            dt_ms=enc["dt_ms"],
            duration_ms=enc["duration_ms"],
            max_rate_hz=enc["max_rate_hz"],
            seed=seed,
        ),
    )


def validate_config(cfg: dict) -> None:
    """Check every field against its owning module before any compute."""
    names = _task_names(cfg)
    epochs = _epochs_list(cfg, len(names))
    if any(e < 1 for e in epochs):
        raise ConfigError(f"schedule.epochs_per_task: epochs must be >= 1, got {epochs}")
    for i, name in enumerate(names):
        _encoding_spec(cfg, name, 1 + i)
    for section in cfg:
        if section.startswith("encoding."):
            sub = section.split(".", 1)[1]
            if sub not in names and sub != "exposure":
                raise ConfigError(f"unknown section: {section}")
    sched = cfg["schedule"]
    if sched["exposure"]:
        _encoding_spec(cfg, "exposure", 1 + len(names))
        if not (0 <= sched["exposure_after_task"] < len(names)):
            raise ConfigError(
                f"schedule.exposure_after_task: must name a task index in "
                f"[0, {len(names) - 1}], got {sched['exposure_after_task']}"
            )
    data = cfg["data"]
    if data["source"] not in ("toy", "idx"):
        raise ConfigError(f"data.source: expected 'toy' or 'idx', got {data['source']!r}")
    if data["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not data[key]:
                raise ConfigError(f"missing required key: data.{key}")
    else:
        if data["classes"] < 2:
            raise ConfigError(f"data.classes: need >= 2 classes, got {data['classes']}")
        if data["n_train_per_class"] < 1 or data["n_test_per_class"] < 1:
            raise ConfigError("data.n_train_per_class/n_test_per_class: must be >= 1")
        if data["separation"] < 0:
            raise ConfigError(f"data.separation: must be >= 0, got {data['separation']}")
        hw = _parse_hw(data["image_hw"])
        if hw is not None and hw[0] * hw[1] != data["feature_dim"]:
            raise ConfigError(
                f"data.image_hw: {hw[0]}x{hw[1]} does not match feature_dim "
                f"{data['feature_dim']}"
            )
    model = cfg["model"]
    _parse_layers(model["layers"])
    if model["mode"] not in MODES:
        raise ConfigError(
            f"model.mode: expected one of {sorted(MODES)}, got {model['mode']!r}"
        )
    gi = _parse_pair("model.gamma_init", model["gamma_init"])
    if not (0.0 < gi[0] <= gi[1] < 1.0):
        raise ConfigError(f"model.gamma_init: need 0 < lo <= hi < 1, got {gi}")
    train = cfg["training"]
    _wrap(
        "training",
        lambda: TrainConfig(
            lr=train["lr"],
            batch_size=train["batch_size"],
            loss=LossConfig(
                lambda_var=train["lambda_var"],
                mu_star=train["mu_star"],
                sigma_star=train["sigma_star"],
            ),
        ),
    )
    _calibration_config(cfg)
    if cfg["run"]["seed"] < 0:
        raise ConfigError(f"run.seed: must be >= 0, got {cfg['run']['seed']}")


def _calibration_config(cfg: dict) -> CalibrationConfig:
    cal = cfg["calibration"]
    return _wrap(
        "calibration",
        lambda: CalibrationConfig(
            target_rate=cal["target_rate"],
            band=(cal["band_lo"], cal["band_hi"]),
            max_iters=cal["max_iters"],
            probe_batches=cal["probe_batches"],
            v_lo=cal["v_lo"],
            v_hi=cal["v_hi"],
        ),
    )


@dataclass
class Experiment:
    """Everything a command needs, materialized from one config."""

    cfg: dict
    hash: str
    schedule: TaskSchedule
    encodings: dict
    train_cfg: TrainConfig
    calib_cfg: CalibrationConfig
    exposure: ExposureConfig | None
    out_dir: Path | None
    seed: int
    mode: str
    build_net: object  # callable: mode -> fresh Network

    def fresh_net(self, mode: str | None = None):
        return self.build_net(self.mode if mode is None else mode)


def _load_datasets(cfg: dict) -> tuple:
    data = cfg["data"]
    # An explicit data seed pins the dataset while run.seed sweeps the
    # network init and batch order, so seeded replicates stay paired.
    seed = data["seed"] if data["seed"] is not None else cfg["run"]["seed"]
    if data["source"] == "toy":
        hw = _parse_hw(data["image_hw"])
        train = make_toy_dataset(
            classes=data["classes"],
            n_per_class=data["n_train_per_class"],
            feature_dim=data["feature_dim"],
            separation=data["separation"],
            seed=seed,
            noise=data["noise"],
            split="train",
            image_hw=hw,
        )
        test = make_toy_dataset(
            classes=data["classes"],
            n_per_class=data["n_test_per_class"],
            feature_dim=data["feature_dim"],
            separation=data["separation"],
            seed=seed,
            noise=data["noise"],
            split="test",
            image_hw=hw,
        )
        return train, test
    train = load_idx(data["train_images"], data["train_labels"])
    test = load_idx(data["test_images"], data["test_labels"])
    if data["limit_train"]:
        train = type(train)(
            images=train.images[: data["limit_train"]],
            labels=train.labels[: data["limit_train"]],
            name=train.name,
            split="train",
        )
    if data["limit_test"]:
        test = type(test)(
            images=test.images[: data["limit_test"]],
            labels=test.labels[: data["limit_test"]],
            name=test.name,
            split="test",
        )
    return train, test


def build_experiment(cfg: dict) -> Experiment:
    """Materialize datasets, schedule, and a network factory.

    Both domains present the same underlying images; only the encoding
    frequency differs between tasks, which is exactly the distribution
    shift under study.
    """
    validate_config(cfg)
    names = _task_names(cfg)
    epochs = _epochs_list(cfg, len(names))
    train_ds, test_ds = _load_datasets(cfg)

    encodings = {
        name: _encoding_spec(cfg, name, 1 + i) for i, name in enumerate(names)
    }
    tasks = [
        TaskDef(
            name=name,
            train_images=train_ds,
            test_images=test_ds,
            encoding=encodings[name],
            epochs=epochs[i],
        )
        for i, name in enumerate(names)
    ]
    schedule = _wrap("schedule.tasks", lambda: TaskSchedule(tasks))

    sched = cfg["schedule"]
    exposure = None
    if sched["exposure"]:
        exp_spec = _encoding_spec(cfg, "exposure", 1 + len(names))
        encodings["exposure"] = exp_spec
        exposure = ExposureConfig(
            encoding=exp_spec,
            recalibrate=sched["exposure_recalibrate"],
            after_task=sched["exposure_after_task"],
        )

    model = cfg["model"]
    layer_descs = _parse_layers(model["layers"])
    if layer_descs[0][0] == "conv2d":
        h, w = train_ds.images.shape[1:]
        input_shape = (1, int(h), int(w))
    else:
        input_shape = (train_ds.feature_dim,)
    n_classes = int(len(np.unique(train_ds.labels)))
    last = layer_descs[-1]
    if last[0] != "dense" or last[1] != n_classes:
        raise ConfigError(
            f"model.layers: final layer must be dense:{n_classes} to match "
            f"the label set, got {model['layers']!r}"
        )
    seed = cfg["run"]["seed"]
    gamma_init = _parse_pair("model.gamma_init", model["gamma_init"])

    def build_net(mode: str):
        return _wrap(
            "model",
            lambda: build_network(
                input_shape,
                layer_descs,
                dt_ms=encodings[names[0]].dt_ms,
                tau_fast_ms=model["tau_fast_ms"],
                tau_slow_ms=model["tau_slow_ms"],
                seed=seed,
                mode=mode,
                surrogate_slope=model["surrogate_slope"],
                spike_condition=model["spike_condition"],
                gamma_init=gamma_init,
                weight_scale=model["weight_scale"],
                v_th=model["v_th_init"],
                detach_reset=model["detach_reset"],
            ),
        )

    train = cfg["training"]
    train_cfg = TrainConfig(
        lr=train["lr"],
        batch_size=train["batch_size"],
        loss=LossConfig(
            lambda_var=train["lambda_var"],
            mu_star=train["mu_star"],
            sigma_star=train["sigma_star"],
        ),
        seed=seed,
    )
    out_dir = Path(cfg["run"]["out_dir"]) if cfg["run"]["out_dir"] else None
    return Experiment(
        cfg=cfg,
        hash=config_hash(cfg),
        schedule=schedule,
        encodings=encodings,
        train_cfg=train_cfg,
        calib_cfg=_calibration_config(cfg),
        exposure=exposure,
        out_dir=out_dir,
        seed=seed,
        mode=model["mode"],
        build_net=build_net,
    )
