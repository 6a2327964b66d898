"""Dual-compartment gated neuron dynamics.

Each neuron carries a fast and a slow leaky integrate-and-fire
compartment. Both integrate the same synaptic current; a per-neuron
gate gamma blends them into the effective membrane potential that is
compared against the firing threshold. On a spike, the threshold is
subtracted from both compartments (soft reset; values may go negative).

All operations are pure functions over explicit state. Arguments may be
numpy arrays (simulation) or autodiff Tensors (training); the arithmetic
is identical on both, and the spike step installs the rectangular
surrogate derivative when it builds a graph node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor, make_node
from .errors import ParameterError, ShapeError

__all__ = [
    "DecayPair",
    "GateVector",
    "CompartmentState",
    "ThresholdConfig",
    "decay_factor",
    "lif_step",
    "gate_blend",
    "fire_and_reset",
    "surrogate_spike_grad",
]


def decay_factor(dt_ms: float, tau_ms: float) -> float:
    """Per-step membrane decay multiplier exp(-dt/tau).

    Args:
      dt_ms: simulation step length in milliseconds, > 0.
      tau_ms: membrane time constant in milliseconds, > 0.

    Returns:
      A decay factor in (0, 1).
    """
    if not (dt_ms > 0.0):
        raise ParameterError(f"dt_ms must be positive, got {dt_ms}")
    if not (tau_ms > 0.0):
        raise ParameterError(f"tau_ms must be positive, got {tau_ms}")
    return math.exp(-dt_ms / tau_ms)


@dataclass(frozen=True)
class DecayPair:
    """Fast and slow decay factors together with their generating constants.

    Invariants: 0 < rho_fast < rho_slow < 1, tau_fast_ms < tau_slow_ms,
    and each rho equals exp(-dt_ms/tau_ms) to within 1e-12 relative error.
    """

    rho_fast: float
    rho_slow: float
    dt_ms: float
    tau_fast_ms: float
    tau_slow_ms: float

    def __post_init__(self):
        if not (0.0 < self.rho_fast < self.rho_slow < 1.0):
            raise ParameterError(
                f"decay factors must satisfy 0 < rho_fast < rho_slow < 1, "
                f"got rho_fast={self.rho_fast}, rho_slow={self.rho_slow}"
            )
        if not (self.tau_fast_ms < self.tau_slow_ms):
            raise ParameterError(
                f"tau_fast_ms ({self.tau_fast_ms}) must be less than "
                f"tau_slow_ms ({self.tau_slow_ms})"
            )
        for rho, tau in ((self.rho_fast, self.tau_fast_ms), (self.rho_slow, self.tau_slow_ms)):
            expected = decay_factor(self.dt_ms, tau)
            if abs(rho - expected) > 1e-12 * expected:
                raise ParameterError(
                    f"rho={rho} inconsistent with exp(-{self.dt_ms}/{tau})={expected}"
                )

    @classmethod
    def from_taus(cls, dt_ms: float, tau_fast_ms: float, tau_slow_ms: float) -> "DecayPair":
        return cls(
            rho_fast=decay_factor(dt_ms, tau_fast_ms),
            rho_slow=decay_factor(dt_ms, tau_slow_ms),
            dt_ms=dt_ms,
            tau_fast_ms=tau_fast_ms,
            tau_slow_ms=tau_slow_ms,
        )

    @classmethod
    def from_rhos(cls, dt_ms: float, rho_fast: float, rho_slow: float) -> "DecayPair":
        """Build from decay factors directly; time constants are derived."""
        if not (0.0 < rho_fast < 1.0) or not (0.0 < rho_slow < 1.0):
            raise ParameterError("decay factors must lie in (0, 1)")
        return cls(
            rho_fast=rho_fast,
            rho_slow=rho_slow,
            dt_ms=dt_ms,
            tau_fast_ms=-dt_ms / math.log(rho_fast),
            tau_slow_ms=-dt_ms / math.log(rho_slow),
        )


@dataclass
class GateVector:
    """Per-neuron (or per-channel) blend gates.

    gamma = logistic(raw) when built from raw parameters, which keeps
    every gate strictly inside (0, 1) for any parameter value. Direct
    construction with constant gamma in [0, 1] is allowed for frozen
    single-timescale configurations.
    """

    gamma: "np.ndarray | Tensor"
    raw: "np.ndarray | Tensor | None" = None

    def __post_init__(self):
        g = self.gamma
        if isinstance(g, np.ndarray) and g.size:
            if g.min() < 0.0 or g.max() > 1.0:
                raise ParameterError("gate values must lie in [0, 1]")

    @classmethod
    def from_raw(cls, raw) -> "GateVector":
        g = autodiff.sigmoid(raw)
        if isinstance(g, np.ndarray):
            # float64 sigmoid saturates for |raw| over ~37; pin to the
            # nearest representable interior value so the open-interval
            # guarantee survives extreme parameters
            g = np.clip(g, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        return cls(gamma=g, raw=raw)

    @classmethod
    def constant(cls, value: float, shape=()) -> "GateVector":
        return cls(gamma=np.full(shape, float(value)))


@dataclass
class CompartmentState:
    """Fast and slow membrane potentials, one entry per neuron."""

    u_fast: "np.ndarray | Tensor"
    u_slow: "np.ndarray | Tensor"

    def __post_init__(self):
        if _shape_of(self.u_fast) != _shape_of(self.u_slow):
            raise ShapeError(
                f"compartment shapes differ: {_shape_of(self.u_fast)} vs "
                f"{_shape_of(self.u_slow)}"
            )

    @classmethod
    def zeros(cls, shape) -> "CompartmentState":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return _shape_of(self.u_fast)


@dataclass
class ThresholdConfig:
    """Firing threshold and spike/reset conventions for one layer.

    spike_condition "combined" fires when the gate-blended membrane
    reaches v_th (inclusive); "either" fires when either compartment
    does. Reset always subtracts v_th from both compartments of the
    neurons that fired.

    surrogate_slope sets the height and width (half-width 1/(2*slope))
    of the rectangular surrogate derivative. smoothed=True replaces the
    hard step in the forward pass by its clamped-linear antiderivative;
    used for finite-difference verification only. detach_reset blocks
    gradient flow through the reset subtraction.
    """

    v_th: float = 1.0
    reset_mode: str = "soft-subtract"
    spike_condition: str = "combined"
    surrogate_slope: float = 1.0
    smoothed: bool = False
    detach_reset: bool = False

    def __post_init__(self):
        if not (self.v_th > 0.0):
            raise ParameterError(f"v_th must be positive, got {self.v_th}")
        if self.reset_mode != "soft-subtract":
            raise ParameterError(f"unsupported reset_mode: {self.reset_mode!r}")
        if self.spike_condition not in ("combined", "either"):
            raise ParameterError(
                f"spike_condition must be 'combined' or 'either', got "
                f"{self.spike_condition!r}"
            )
        if not (self.surrogate_slope > 0.0):
            raise ParameterError(
                f"surrogate_slope must be positive, got {self.surrogate_slope}"
            )


def _shape_of(x) -> tuple[int, ...]:
    return x.data.shape if isinstance(x, Tensor) else np.shape(x)


def lif_step(state: CompartmentState, input_current, decays: DecayPair) -> CompartmentState:
    """One integration step: u' = rho * u + I for both compartments.

    No reset happens here; spiking is handled by fire_and_reset.
    """
    if _shape_of(input_current) != state.shape:
        raise ShapeError(
            f"input current shape {_shape_of(input_current)} does not match "
            f"state shape {state.shape}"
        )
    return CompartmentState(
        u_fast=decays.rho_fast * state.u_fast + input_current,
        u_slow=decays.rho_slow * state.u_slow + input_current,
    )


def gate_blend(state: CompartmentState, gates):
    """Effective membrane U = gamma * u_slow + (1 - gamma) * u_fast."""
    gamma = gates.gamma if isinstance(gates, GateVector) else gates
    if not isinstance(gamma, Tensor) and not isinstance(state.u_fast, Tensor):
        gshape = np.shape(gamma)
        try:
            if np.broadcast_shapes(gshape, state.shape) != state.shape:
                raise ValueError
        except ValueError:
            raise ShapeError(
                f"gate shape {gshape} does not broadcast to state shape {state.shape}"
            ) from None
    return gamma * state.u_slow + (1.0 - gamma) * state.u_fast


def surrogate_spike_grad(effective_u, v_th: float, slope: float) -> np.ndarray:
    """Rectangular surrogate d(spike)/dU.

    Equals `slope` where |U - v_th| <= 1/(2*slope) and 0 elsewhere, so
    the window integrates to 1 regardless of slope.
    """
    if not (slope > 0.0):
        raise ParameterError(f"slope must be positive, got {slope}")
    u = np.asarray(effective_u, dtype=np.float64)
    half_width = 0.5 / slope
    return np.where(np.abs(u - v_th) <= half_width, slope, 0.0)


def _spike(u, thr: ThresholdConfig):
    """Spike indicator for a membrane value, with surrogate backward."""
    if isinstance(u, Tensor):
        if thr.smoothed:
            data = np.clip(
                thr.surrogate_slope * (u.data - thr.v_th) + 0.5, 0.0, 1.0
            )
        else:
            data = (u.data >= thr.v_th).astype(np.float64)
        window = surrogate_spike_grad(u.data, thr.v_th, thr.surrogate_slope)
        return make_node(data, (u,), lambda g: (g * window,))
    if thr.smoothed:
        return np.clip(thr.surrogate_slope * (u - thr.v_th) + 0.5, 0.0, 1.0)
    return (np.asarray(u) >= thr.v_th).astype(np.float64)


def fire_and_reset(state: CompartmentState, gates, thr: ThresholdConfig):
    """Spike generation followed by soft subtractive reset.

    Returns (spikes, new_state, effective_u) where effective_u is the
    pre-reset blended membrane, and new_state has v_th subtracted from
    both compartments of every spiking neuron (no clamping; compartments
    may go negative).
    """
    effective_u = gate_blend(state, gates)
    if thr.spike_condition == "combined":
        spikes = _spike(effective_u, thr)
    else:
        s_fast = _spike(state.u_fast, thr)
        s_slow = _spike(state.u_slow, thr)
        # logical OR written arithmetically so it holds on both backends
        spikes = s_fast + s_slow - s_fast * s_slow
    reset_src = spikes
    if thr.detach_reset and isinstance(spikes, Tensor):
        reset_src = spikes.detach()
    delta = reset_src * thr.v_th
    new_state = CompartmentState(
        u_fast=state.u_fast - delta,
        u_slow=state.u_slow - delta,
    )
    return spikes, new_state, effective_u
