"""Surrogate-gradient training: losses, BPTT, Adam, gradient checking.

The loss is mean softmax cross-entropy on the time-summed readout plus
a homeostatic penalty that pulls each hidden neuron's firing mean and
spread toward targets. Gradients flow through the full time unroll; the
spike nonlinearity contributes its rectangular surrogate derivative,
including through the soft-reset pathway unless detach_reset is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor, make_node, value_of
from .errors import ParameterError, ShapeError
from .network import ForwardTrace, Network, forward, predict

# variance of a spike indicator is floored here before the square root
# so silent neurons cannot produce an infinite d(sigma)/d(variance)
_VAR_FLOOR = 1e-16


@dataclass
class LossConfig:
    """Composite loss settings.

    mu_star and sigma_star are targets for the per-neuron mean and
    population standard deviation of the binary spike indicator, pooled
    over batch and time. lambda_var = 0 disables the penalty.
    """

    lambda_var: float = 0.01
    mu_star: float = 0.02
    sigma_star: float = 0.015
    stat_source: str = "spike_count"

    def __post_init__(self):
        if self.lambda_var < 0.0:
            raise ParameterError(f"lambda_var must be >= 0, got {self.lambda_var}")
        if not (0.0 <= self.mu_star <= 1.0):
            raise ParameterError(f"mu_star must lie in [0, 1], got {self.mu_star}")
        if self.sigma_star < 0.0:
            raise ParameterError(f"sigma_star must be >= 0, got {self.sigma_star}")
        if self.stat_source != "spike_count":
            raise ParameterError(f"unsupported stat_source: {self.stat_source!r}")


@dataclass
class AdamState:
    """Adam optimizer state (first/second moments per parameter)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class GradientReport:
    """Finite-difference comparison result per parameter group."""

    regime: str
    epsilon: float
    tol: float
    max_rel_err_per_group: dict
    passed: bool

    @property
    def max_rel_err(self) -> float:
        return max(self.max_rel_err_per_group.values())

    @property
    def failed_groups(self) -> list:
        return [
            name
            for name, err in self.max_rel_err_per_group.items()
            if err > self.tol
        ]


def firing_stats(trace: ForwardTrace, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron spike statistics from a recorded raster.

    mu[i] is the mean of neuron i's binary indicator over batch x time;
    sigma[i] is the population standard deviation (divisor N).
    """
    if trace.rasters is None:
        raise ValueError("trace has no recorded rasters; run forward(record=True)")
    if not (0 <= layer < len(trace.rasters)):
        raise ValueError(f"no raster for layer {layer}")
    raster = trace.rasters[layer]  # [T, B, N]
    mu = raster.mean(axis=(0, 1))
    sigma = raster.std(axis=(0, 1))
    return mu, sigma


def variance_loss(stats, cfg: LossConfig) -> float:
    """Homeostatic penalty summed over the supplied (mu, sigma) pairs."""
    if cfg.lambda_var == 0.0:
        return 0.0
    total = 0.0
    for mu, sigma in stats:
        total += float(((mu - cfg.mu_star) ** 2).sum())
        total += float(((sigma - cfg.sigma_star) ** 2).sum())
    return cfg.lambda_var * total


def _softmax_ce_array(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float((log_z - picked).mean())


def _softmax_ce_node(logits: Tensor, labels: np.ndarray) -> Tensor:
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    log_z = np.log(expd.sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    value = (log_z - picked).mean()

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(len(labels)), labels] -= 1.0
        return (grad * (float(g) / len(labels)),)

    return make_node(value, (logits,), vjp)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def _variance_loss_from_sums(trace: ForwardTrace, cfg: LossConfig):
    """Penalty over hidden layers, built from the trace's running sums.

    Works on Tensors (training graph) and arrays alike. sigma uses a
    floored variance so the gradient stays finite for silent neurons.
    """
    n = trace.batch_size * trace.n_steps
    total = None
    for i in range(len(trace.spike_sums) - 1):  # hidden layers only
        s = trace.spike_sums[i]
        s2 = trace.spike_sqsums[i]
        mu = s.sum(axis=0) * (1.0 / n)
        second = s2.sum(axis=0) * (1.0 / n)
        var = second - mu * mu
        sigma = autodiff.sqrt(autodiff.maximum(var, _VAR_FLOOR))
        term = ((mu - cfg.mu_star) ** 2).sum() + ((sigma - cfg.sigma_star) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return 0.0
    return total * cfg.lambda_var


def total_loss(trace: ForwardTrace, labels: np.ndarray, cfg: LossConfig):
    """Mean cross-entropy on the readout accumulator plus the variance term.

    Returns a Tensor when the trace came from a graph-mode forward pass,
    otherwise a float.
    """
    acc = trace.accumulator
    labels = _check_labels(labels, value_of(acc).shape[1])
    if isinstance(acc, Tensor):
        ce = _softmax_ce_node(acc, labels)
        if cfg.lambda_var == 0.0:
            return ce
        return ce + _variance_loss_from_sums(trace, cfg)
    ce = _softmax_ce_array(acc, labels)
    if cfg.lambda_var == 0.0:
        return ce
    if trace.rasters is not None:
        stats = [firing_stats(trace, i) for i in range(len(trace.rasters) - 1)]
        return ce + variance_loss(stats, cfg)
    return ce + float(value_of(_variance_loss_from_sums(trace, cfg)))


def trainable_params(net: Network) -> dict:
    """Name -> ndarray view of every parameter the optimizer may touch.

    Gate raws are trainable only in ltgate mode; frozen modes expose
    weights and biases alone.
    """
    params = {}
    for i, layer in enumerate(net.layers):
        params[f"layer{i}.weights"] = layer.weights
        params[f"layer{i}.bias"] = layer.bias
        if net.mode == "ltgate":
            params[f"layer{i}.raw_gamma"] = layer.raw_gamma
    return params


def backward(net: Network, batch, labels, cfg: LossConfig, smoothed: bool = False):
    """Gradients of total_loss for every trainable parameter.

    Returns (loss_value, grads, trace) where grads maps the names from
    trainable_params to ndarrays.
    """
    tensors = {}
    handles = {}
    for i, layer in enumerate(net.layers):
        entry = {
            "weights": Tensor(layer.weights),
            "bias": Tensor(layer.bias),
            "raw_gamma": Tensor(layer.raw_gamma) if net.mode == "ltgate" else None,
        }
        tensors[i] = entry
        handles[f"layer{i}.weights"] = entry["weights"]
        handles[f"layer{i}.bias"] = entry["bias"]
        if net.mode == "ltgate":
            handles[f"layer{i}.raw_gamma"] = entry["raw_gamma"]
    trace = forward(net, batch, tensors=tensors, smoothed=smoothed or None)
    loss = total_loss(trace, labels, cfg)
    loss.backward()
    grads = {
        name: (h.grad if h.grad is not None else np.zeros_like(h.data))
        for name, h in handles.items()
    }
    return float(loss.data), grads, trace


def loss_value(net: Network, batch, labels, cfg: LossConfig, smoothed: bool = False) -> float:
    """Scalar loss from a plain (graph-free) simulation."""
    trace = forward(net, batch, record=True, smoothed=smoothed or None)
    return float(value_of(total_loss(trace, labels, cfg)))


def compare_gradients(loss_fn, params: dict, analytic: dict, epsilon: float, tol: float, regime: str) -> GradientReport:
    """Central finite differences against supplied analytic gradients.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8); each
    group's maximum must stay within tol.
    """
    per_group = {}
    for name, values in params.items():
        grad = analytic[name]
        if grad.shape != values.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        worst = 0.0
        flat = values.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + epsilon
            up = loss_fn()
            flat[idx] = original - epsilon
            down = loss_fn()
            flat[idx] = original
            numeric = (up - down) / (2.0 * epsilon)
            a = gflat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_group[name] = worst
    passed = all(err <= tol for err in per_group.values())
    return GradientReport(
        regime=regime,
        epsilon=epsilon,
        tol=tol,
        max_rel_err_per_group=per_group,
        passed=passed,
    )


def gradcheck(
    net: Network,
    batch,
    labels,
    cfg: LossConfig,
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    smoothed: bool = False,
) -> GradientReport:
    """Verify backward() against central differences.

    The hard spike step is not finite-differentiable, so run this either
    on a configuration that never crosses threshold, or with
    smoothed=True, which replaces the step by its clamped-linear
    antiderivative in both the analytic and numeric passes. The report
    names which regime ran.
    """
    _, analytic, _ = backward(net, batch, labels, cfg, smoothed=smoothed)
    params = trainable_params(net)
    regime = "surrogate-smoothed" if smoothed else "no-spike"
    return compare_gradients(
        lambda: loss_value(net, batch, labels, cfg, smoothed=smoothed),
        params,
        analytic,
        epsilon,
        tol,
        regime,
    )


def adam_step(params: dict, grads: dict, state: AdamState):
    """One in-place Adam update with bias correction for every parameter."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    """Optimization settings for an epoch loop."""

    lr: float = 0.001
    batch_size: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0.0):
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TaskData:
    """One task's encoded training set plus named evaluation sets."""

    train_spikes: object  # SpikeTrainBatch or [B,T,F] array
    train_labels: np.ndarray
    eval_sets: dict = field(default_factory=dict)  # name -> (spikes, labels)


@dataclass
class TrainRecord:
    """Per-epoch series produced by train_task."""

    rows: list = field(default_factory=list)

    def series(self, key: str) -> list:
        return [row[key] for row in self.rows]


def evaluate(net: Network, spikes, labels, loss_cfg: LossConfig | None = None, batch_size: int = 256) -> dict:
    """Accuracy, loss, per-layer rates and spike counts on one eval set."""
    x = spikes.spikes if hasattr(spikes, "spikes") else spikes
    labels = np.asarray(labels)
    n = x.shape[0]
    correct = 0
    loss_sum = 0.0
    counts = np.zeros(len(net.layers))
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = labels[start : start + batch_size]
        trace = forward(net, xb, record=loss_cfg is not None)
        correct += int((predict(trace) == yb).sum())
        counts += trace.spike_counts
        if loss_cfg is not None:
            loss_sum += float(value_of(total_loss(trace, yb, loss_cfg))) * len(yb)
    units = np.array([l.units for l in net.layers])
    t = x.shape[1]
    return {
        "accuracy": correct / n,
        "loss": loss_sum / n if loss_cfg is not None else float("nan"),
        "layer_rates": counts / (n * t * units),
        "spikes_per_inference": float(counts.sum()) / n,
    }


def train_task(
    net: Network,
    task: TaskData,
    epochs: int,
    cfg: TrainConfig,
    callbacks=(),
    adam: AdamState | None = None,
) -> tuple[TrainRecord, AdamState]:
    """Minibatch BPTT training on one task.

    Shuffling is driven by cfg.seed; weights are never reinitialized, so
    chaining calls trains tasks sequentially. Passing the previous
    task's AdamState keeps optimizer moments across the boundary.
    Callbacks run after each epoch as callback(epoch_index, row, net).
    """
    record = TrainRecord()
    if epochs == 0:
        return record, adam if adam is not None else AdamState(lr=cfg.lr)
    x = task.train_spikes.spikes if hasattr(task.train_spikes, "spikes") else task.train_spikes
    y = np.asarray(task.train_labels)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("training spikes and labels disagree on batch size")
    if adam is None:
        adam = AdamState(lr=cfg.lr)
    params = trainable_params(net)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        seen = 0
        correct = 0
        loss_sum = 0.0
        counts = np.zeros(len(net.layers))
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x[idx]
            yb = y[idx]
            loss, grads, trace = backward(net, xb, yb, cfg.loss)
            adam_step(params, grads, adam)
            seen += len(idx)
            loss_sum += loss * len(idx)
            correct += int((predict(trace) == yb).sum())
            counts += trace.spike_counts
        units = np.array([l.units for l in net.layers])
        row = {
            "epoch": epoch + 1,
            "train_acc": correct / seen,
            "train_loss": loss_sum / seen,
            "spikes_per_inference": float(counts.sum()) / seen,
        }
        for i, rate in enumerate(counts / (seen * x.shape[1] * units)):
            row[f"rate_l{i}"] = float(rate)
        for name, (es, el) in task.eval_sets.items():
            stats = evaluate(net, es, el, loss_cfg=cfg.loss)
            row[f"eval_{name}_acc"] = stats["accuracy"]
            row[f"eval_{name}_loss"] = stats["loss"]
        record.rows.append(row)
        for cb in callbacks:
            cb(epoch, row, net)
    return record, adam
