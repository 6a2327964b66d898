"""Layer stacks of gated dual-timescale neurons, unrolled over time.

A Network is an ordered list of LayerSpec entries (conv2d or dense).
forward() drives the stack with a binary spike raster [batch, time,
features]: at every step each layer applies its synaptic transform to
the incoming spikes, integrates both compartments, blends them through
its gates, fires, and soft-resets. The final layer's pre-reset blended
membrane is summed over time into the classification accumulator.

The same loop serves simulation and training: when parameter Tensors
are supplied, every intermediate value becomes a graph node and the
returned trace holds Tensors instead of arrays.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor, value_of
from .convolution import conv2d, conv_output_hw
from .errors import ParameterError, ShapeError
from .neuron import (
    CompartmentState,
    DecayPair,
    GateVector,
    ThresholdConfig,
    fire_and_reset,
    lif_step,
)

MODES = ("ltgate", "single_fast", "single_slow", "gate_frozen_half")

# gate value enforced by each frozen mode
_FROZEN_GAMMA = {"single_fast": 0.0, "single_slow": 1.0, "gate_frozen_half": 0.5}


@dataclass
class LayerSpec:
    """One layer: synaptic transform plus neuron parameters.

    weights are [out, in] for dense layers and [O, C, kh, kw] for conv
    layers; raw_gamma holds one pre-gate parameter per neuron (dense) or
    per output channel (conv).
    """

    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    weights: np.ndarray
    bias: np.ndarray
    raw_gamma: np.ndarray
    decays: DecayPair
    threshold: ThresholdConfig
    kernel: tuple[int, int] | None = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv2d", "dense"):
            raise ParameterError(f"unknown layer kind: {self.kind!r}")
        if self.kind == "dense":
            expect = (int(np.prod(self.out_shape)), int(np.prod(self.in_shape)))
            if self.weights.shape != expect:
                raise ShapeError(
                    f"dense weights must be {expect}, got {self.weights.shape}"
                )
            if self.raw_gamma.shape != (expect[0],):
                raise ShapeError("dense raw_gamma must have one entry per neuron")
        else:
            if self.kernel is None:
                raise ParameterError("conv2d layer needs a kernel size")
            c, h, w = self.in_shape
            o = self.out_shape[0]
            kh, kw = self.kernel
            if self.weights.shape != (o, c, kh, kw):
                raise ShapeError(
                    f"conv weights must be {(o, c, kh, kw)}, got {self.weights.shape}"
                )
            if self.raw_gamma.shape != (o,):
                raise ShapeError("conv raw_gamma must have one entry per channel")
            if conv_output_hw(h, w, kh, kw, self.stride) != tuple(self.out_shape[1:]):
                raise ShapeError(
                    f"out_shape {self.out_shape} inconsistent with kernel/stride"
                )
        if self.bias.shape != (self.out_shape[0] if self.kind == "conv2d" else int(np.prod(self.out_shape)),):
            raise ShapeError("bias must have one entry per output unit/channel")

    @property
    def units(self) -> int:
        return int(np.prod(self.out_shape))

    def gates(self) -> GateVector:
        return GateVector.from_raw(self.raw_gamma)


@dataclass
class Network:
    """Ordered layer stack with a global simulation mode.

    Modes: "ltgate" learns gamma = logistic(raw) per neuron;
    "single_fast"/"single_slow" freeze every gate at 0/1, reducing each
    neuron to one compartment; "gate_frozen_half" fixes the blend at 0.5.
    """

    layers: list[LayerSpec]
    mode: str = "ltgate"
    readout: str = "membrane_sum"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode: {self.mode!r}")
        if self.readout != "membrane_sum":
            raise ParameterError(f"unsupported readout: {self.readout!r}")
        if not self.layers:
            raise ParameterError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.kind == "conv2d":
                if tuple(prev.out_shape) != tuple(nxt.in_shape):
                    raise ShapeError(
                        f"layer shapes do not chain: {prev.out_shape} -> {nxt.in_shape}"
                    )
            elif int(np.prod(prev.out_shape)) != int(np.prod(nxt.in_shape)):
                raise ShapeError(
                    f"layer shapes do not chain: {prev.out_shape} -> {nxt.in_shape}"
                )

    @property
    def n_classes(self) -> int:
        return self.layers[-1].units

    @property
    def input_size(self) -> int:
        return int(np.prod(self.layers[0].in_shape))

    def effective_gamma(self, index: int, raw_override=None):
        """Gate values for one layer under the current mode.

        Conv gammas are reshaped to [O,1,1] so they broadcast per channel.
        """
        layer = self.layers[index]
        if self.mode in _FROZEN_GAMMA:
            return np.float64(_FROZEN_GAMMA[self.mode])
        raw = raw_override if raw_override is not None else layer.raw_gamma
        gamma = autodiff.sigmoid(raw)
        if layer.kind == "conv2d":
            gamma = gamma.reshape((-1, 1, 1))
        return gamma

    def gamma_values(self, index: int) -> np.ndarray:
        """Flat ndarray of this layer's gate values under the current mode."""
        layer = self.layers[index]
        if self.mode in _FROZEN_GAMMA:
            return np.full(layer.raw_gamma.shape, _FROZEN_GAMMA[self.mode])
        return autodiff.sigmoid(layer.raw_gamma)

    def clone(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """Everything forward() records about one simulated batch.

    In training mode (parameter Tensors supplied) accumulator,
    spike_sums and spike_sqsums are graph Tensors; otherwise plain
    arrays. Rasters, when recorded, are [T, batch, units] per layer with
    conv spatial dimensions flattened.
    """

    accumulator: "np.ndarray | Tensor"
    spike_counts: np.ndarray
    layer_units: np.ndarray
    batch_size: int
    n_steps: int
    spike_sums: list
    spike_sqsums: list
    rasters: list | None = None
    membranes: list | None = None

    def total_spikes(self) -> float:
        return float(self.spike_counts.sum())

    def spikes_per_inference(self) -> float:
        return self.total_spikes() / self.batch_size

    def layer_rate(self, index: int) -> float:
        denom = self.batch_size * self.n_steps * self.layer_units[index]
        return float(self.spike_counts[index]) / denom


def _input_array(batch) -> np.ndarray:
    x = batch.spikes if hasattr(batch, "spikes") else batch
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"input must be [batch, time, features], got {x.shape}")
    return x


def forward(net: Network, batch, record: bool = False, tensors=None, smoothed=None) -> ForwardTrace:
    """Simulate the stack over the full time axis of one batch.

    Args:
      net: the network; state starts at zero for every sequence.
      batch: SpikeTrainBatch or binary array [batch, time, features].
      record: keep per-layer spike rasters and membrane traces.
      tensors: optional {layer_index: {"weights", "bias", "raw_gamma"}}
        Tensor overrides; switches the simulation into graph mode.
      smoothed: override the layers' smoothed-spike setting (gradcheck).
    """
    x = _input_array(batch)
    b, t, f = x.shape
    if t < 1:
        raise ShapeError("time axis is empty")
    if f != net.input_size:
        raise ShapeError(
            f"input features {f} do not match first layer size {net.input_size}"
        )

    n_layers = len(net.layers)
    params = []
    gammas = []
    thresholds = []
    for i, layer in enumerate(net.layers):
        ov = tensors.get(i) if tensors else None
        weights = ov["weights"] if ov else layer.weights
        bias = ov["bias"] if ov else layer.bias
        raw = ov.get("raw_gamma") if ov else None
        params.append((weights, bias))
        gammas.append(net.effective_gamma(i, raw_override=raw))
        thr = layer.threshold
        if smoothed is not None and smoothed != thr.smoothed:
            thr = ThresholdConfig(
                v_th=thr.v_th,
                reset_mode=thr.reset_mode,
                spike_condition=thr.spike_condition,
                surrogate_slope=thr.surrogate_slope,
                smoothed=smoothed,
                detach_reset=thr.detach_reset,
            )
        thresholds.append(thr)

    states = [CompartmentState.zeros((b,) + tuple(l.out_shape)) for l in net.layers]
    spike_counts = np.zeros(n_layers)
    spike_sums = [None] * n_layers
    spike_sqsums = [None] * n_layers
    rasters = [[] for _ in range(n_layers)] if record else None
    membranes = [[] for _ in range(n_layers)] if record else None
    accumulator = None

    for step in range(t):
        signal = x[:, step, :].astype(np.float64)
        for i, layer in enumerate(net.layers):
            weights, bias = params[i]
            if layer.kind == "conv2d":
                if _shape_tail(signal) != tuple(layer.in_shape):
                    signal = _reshape(signal, (b,) + tuple(layer.in_shape))
                current = conv2d(signal, weights, bias, layer.stride)
            else:
                if len(_shape_tail(signal)) != 1:
                    signal = _reshape(signal, (b, -1))
                current = signal @ weights.T + bias
            states[i] = lif_step(states[i], current, layer.decays)
            spikes, states[i], effective_u = fire_and_reset(
                states[i], gammas[i], thresholds[i]
            )
            spike_data = value_of(spikes)
            spike_counts[i] += float(spike_data.sum())
            if record:
                rasters[i].append(spike_data.reshape(b, -1).copy())
                membranes[i].append(value_of(effective_u).reshape(b, -1).copy())
            flat = spikes if layer.kind == "dense" else _reshape(spikes, (b, -1))
            sq = spikes * spikes
            sq_flat = sq if layer.kind == "dense" else _reshape(sq, (b, -1))
            spike_sums[i] = flat if spike_sums[i] is None else spike_sums[i] + flat
            spike_sqsums[i] = (
                sq_flat if spike_sqsums[i] is None else spike_sqsums[i] + sq_flat
            )
            if i == n_layers - 1:
                out = effective_u if layer.kind == "dense" else _reshape(effective_u, (b, -1))
                accumulator = out if accumulator is None else accumulator + out
            signal = spikes

    return ForwardTrace(
        accumulator=accumulator,
        spike_counts=spike_counts,
        layer_units=np.array([l.units for l in net.layers]),
        batch_size=b,
        n_steps=t,
        spike_sums=spike_sums,
        spike_sqsums=spike_sqsums,
        rasters=[np.stack(r) for r in rasters] if record else None,
        membranes=[np.stack(m) for m in membranes] if record else None,
    )


def _shape_tail(x) -> tuple[int, ...]:
    shape = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    return tuple(shape[1:])


def _reshape(x, shape):
    return x.reshape(shape)


def predict(trace: ForwardTrace) -> np.ndarray:
    """Class index per batch element; ties resolve to the lowest index."""
    acc = value_of(trace.accumulator)
    return np.argmax(acc, axis=1)


def spike_ratio(trace_a: ForwardTrace, trace_b: ForwardTrace) -> float:
    """Total spikes of A per total spike of B."""
    total_b = trace_b.total_spikes()
    if total_b == 0.0:
        raise ZeroDivisionError("baseline trace has no spikes")
    return trace_a.total_spikes() / total_b


def build_network(
    input_shape,
    layer_descs,
    *,
    dt_ms: float = 1.0,
    tau_fast_ms: float = 5.0,
    tau_slow_ms: float = 50.0,
    seed: int = 0,
    mode: str = "ltgate",
    surrogate_slope: float = 1.0,
    spike_condition: str = "combined",
    gamma_init: tuple[float, float] = (0.4, 0.6),
    weight_scale: float = 1.0,
    v_th: float = 1.0,
    detach_reset: bool = False,
) -> Network:
    """Construct a network with Kaiming fan-in weights and zero biases.

    layer_descs entries are ("dense", units) or
    ("conv2d", out_channels, kernel, stride). Gate raws are initialized
    so gamma is uniform over gamma_init.
    """
    lo, hi = gamma_init
    if not (0.0 < lo <= hi < 1.0):
        raise ParameterError(f"gamma_init must satisfy 0 < lo <= hi < 1, got {gamma_init}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    decays = DecayPair.from_taus(dt_ms, tau_fast_ms, tau_slow_ms)
    layers = []
    current = tuple(int(s) for s in (input_shape if np.iterable(input_shape) else (input_shape,)))
    for desc in layer_descs:
        kind = desc[0]
        if kind == "dense":
            units = int(desc[1])
            in_units = int(np.prod(current))
            fan_in = in_units
            weights = rng.normal(0.0, math.sqrt(2.0 / fan_in), (units, in_units))
            weights *= weight_scale
            bias = np.zeros(units)
            g = rng.uniform(lo, hi, units)
            out_shape = (units,)
            kernel = None
            stride = 1
        elif kind == "conv2d":
            out_ch, k, stride = int(desc[1]), int(desc[2]), int(desc[3])
            if len(current) != 3:
                raise ShapeError(
                    f"conv2d layer needs a (C,H,W) input, got shape {current}"
                )
            c, h, w = current
            fan_in = c * k * k
            weights = rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, c, k, k))
            weights *= weight_scale
            bias = np.zeros(out_ch)
            g = rng.uniform(lo, hi, out_ch)
            ho, wo = conv_output_hw(h, w, k, k, stride)
            out_shape = (out_ch, ho, wo)
            kernel = (k, k)
        else:
            raise ParameterError(f"unknown layer kind: {kind!r}")
        raw = np.log(g / (1.0 - g))  # logit, inverse of the logistic gate
        layers.append(
            LayerSpec(
                kind=kind,
                in_shape=current,
                out_shape=out_shape,
                weights=weights,
                bias=bias,
                raw_gamma=raw,
                decays=decays,
                threshold=ThresholdConfig(
                    v_th=v_th,
                    spike_condition=spike_condition,
                    surrogate_slope=surrogate_slope,
                    detach_reset=detach_reset,
                ),
                kernel=kernel,
                stride=stride,
            )
        )
        current = out_shape
    return Network(layers=layers, mode=mode, seed=seed)
