"""Pre-training threshold calibration.

Before any weight update, each layer's firing threshold is bisected
(front to back, in log space) until the layer's mean spike rate on a
fixed probe batch falls inside the target band. Probe data is encoded
once per calibration run, so the rate-versus-threshold function the
search sees is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ParameterError
from .network import Network, forward


@dataclass
class CalibrationConfig:
    """Search targets and limits for per-layer threshold calibration."""

    target_rate: float = 0.02
    band: tuple[float, float] = (0.015, 0.025)
    max_iters: int = 30
    probe_batches: int = 3
    v_lo: float = 1e-3
    v_hi: float = 1e3

    def __post_init__(self):
        lo, hi = self.band
        if not (0.0 < lo <= self.target_rate <= hi < 1.0):
            raise ParameterError(
                f"band must satisfy 0 < lo <= target <= hi < 1, got "
                f"band={self.band}, target={self.target_rate}"
            )
        if not (0.0 < self.v_lo < self.v_hi):
            raise ParameterError(
                f"thresholds must satisfy 0 < v_lo < v_hi, got "
                f"({self.v_lo}, {self.v_hi})"
            )
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.probe_batches < 1:
            raise ParameterError(
                f"probe_batches must be >= 1, got {self.probe_batches}"
            )


@dataclass
class LayerCalibration:
    """Outcome of the search for one layer."""

    layer: int
    v_th: float
    rate: float
    iterations: int
    converged: bool
    monotone_ok: bool
    bracket: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "v_th": self.v_th,
            "rate": self.rate,
            "iterations": self.iterations,
            "converged": self.converged,
            "monotone_ok": self.monotone_ok,
            "bracket": list(self.bracket),
        }


@dataclass
class CalibrationReport:
    rows: list = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "all_converged": self.all_converged,
            "layers": [r.to_dict() for r in self.rows],
        }


def measure_rate(net: Network, probe, layer: int) -> float:
    """Mean of the layer's binary spike raster over neurons, time, batch."""
    trace = forward(net, probe)
    return trace.layer_rate(layer)


def calibrate(net: Network, probe, cfg: CalibrationConfig | None = None) -> CalibrationReport:
    """Bisect each layer's v_th until its probe rate enters the band.

    Layers are handled front to back because later layers' input rates
    depend on earlier thresholds. The rate is assumed non-increasing in
    v_th; a violation observed during the search is flagged in the
    report, and a search that runs out of iterations falls back to the
    best threshold seen. Raises CalibrationError when even v_lo cannot
    reach the lower band edge (input too sparse). Thresholds are updated
    on `net` in place.
    """
    cfg = cfg or CalibrationConfig()
    band_lo, band_hi = cfg.band
    report = CalibrationReport()
    for k in range(len(net.layers)):
        thr = net.layers[k].threshold
        original = thr.v_th
        history = []

        def rate_at(v: float) -> float:
            thr.v_th = v
            r = measure_rate(net, probe, k)
            history.append((v, r))
            return r

        r0 = rate_at(original)
        if band_lo <= r0 <= band_hi:
            report.rows.append(
                LayerCalibration(
                    layer=k,
                    v_th=original,
                    rate=r0,
                    iterations=0,
                    converged=True,
                    monotone_ok=True,
                    bracket=(original, original),
                )
            )
            continue

        r_lo = rate_at(cfg.v_lo)
        if r_lo < band_lo:
            thr.v_th = original
            raise CalibrationError(
                f"layer {k}: rate {r_lo:.6f} at v_th={cfg.v_lo} is below the "
                f"band ({band_lo}, {band_hi}); probe input too sparse"
            )
        iterations = 1
        converged = False
        chosen = (cfg.v_lo, r_lo)
        best = (abs(r_lo - cfg.target_rate), cfg.v_lo, r_lo)
        lo, hi = cfg.v_lo, cfg.v_hi
        if band_lo <= r_lo <= band_hi:
            converged = True
        else:
            while iterations < cfg.max_iters:
                mid = float(np.sqrt(lo * hi))  # geometric midpoint
                r = rate_at(mid)
                iterations += 1
                if abs(r - cfg.target_rate) < best[0]:
                    best = (abs(r - cfg.target_rate), mid, r)
                if band_lo <= r <= band_hi:
                    chosen = (mid, r)
                    converged = True
                    break
                if r > band_hi:
                    lo = mid
                else:
                    hi = mid
            if not converged:
                chosen = (best[1], best[2])
        thr.v_th = chosen[0]
        history.sort(key=lambda pair: pair[0])
        monotone_ok = all(
            history[i + 1][1] <= history[i][1] + 1e-12
            for i in range(len(history) - 1)
        )
        report.rows.append(
            LayerCalibration(
                layer=k,
                v_th=chosen[0],
                rate=chosen[1],
                iterations=iterations,
                converged=converged,
                monotone_ok=monotone_ok,
                bracket=(lo, hi),
            )
        )
    return report
