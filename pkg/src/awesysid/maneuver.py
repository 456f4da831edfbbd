"""Elevator excitation signals and flight-envelope monitoring.

Signals are sampled on t_k = k·T_s and are deviations from the trim
deflection. A sample belongs to a segment when its time falls inside the
half-open segment interval (floor indexing), so switching times that are not
grid-aligned are resolved the same way on every run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

_EPS = 1e-9


class ManeuverError(ValueError):
    pass


class ManeuverKind(str, Enum):
    THREE_TWO_ONE_ONE = "3211"
    DOUBLET = "doublet"
    PIECEWISE_CONSTANT = "piecewise"


def n_samples(total: float, T_s: float) -> int:
    """Number of samples covering [0, total] inclusive."""
    return int(round(total / T_s)) + 1


def _segments(values: Sequence[float], widths: Sequence[float], T_s: float,
              lead_in: float, total: float) -> np.ndarray:
    if not T_s > 0:
        raise ManeuverError("sample period must be positive")
    if lead_in < 0:
        raise ManeuverError("lead-in must be non-negative")
    duration = float(sum(widths))
    if lead_in + duration > total + _EPS:
        raise ManeuverError(
            f"signal needs {lead_in + duration:.3f} s but the experiment lasts {total:.3f} s")
    n = n_samples(total, T_s)
    t = np.arange(n) * T_s - lead_in
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    u = np.zeros(n)
    for value, lo, hi in zip(values, edges[:-1], edges[1:]):
        mask = (t >= lo - _EPS) & (t < hi - _EPS)
        u[mask] = value
    return u


def generate_3211(A: float, dT: float, T_s: float, lead_in: float = 0.0,
                  total: float = 20.0) -> np.ndarray:
    """3-2-1-1 multistep: +A for 3ΔT, -A for 2ΔT, +A for ΔT, -A for ΔT."""
    if not dT > 0:
        raise ManeuverError("base interval must be positive")
    return _segments([A, -A, A, -A], [3 * dT, 2 * dT, dT, dT], T_s, lead_in, total)


def generate_doublet(A: float, dT: float, T_s: float, lead_in: float = 0.0,
                     total: float = 10.0) -> np.ndarray:
    if not dT > 0:
        raise ManeuverError("base interval must be positive")
    return _segments([A, -A], [dT, dT], T_s, lead_in, total)


def generate_piecewise(knots: Sequence[float], knot_interval: float, T_s: float,
                       lead_in: float = 0.0, total: float = 10.0) -> np.ndarray:
    if not knot_interval > 0:
        raise ManeuverError("knot interval must be positive")
    if len(knots) == 0:
        raise ManeuverError("at least one knot is required")
    return _segments(list(knots), [knot_interval] * len(knots), T_s, lead_in, total)


@dataclass(frozen=True)
class Envelope:
    """Box bounds on the absolute longitudinal states and the elevator.

    Defaults are configuration placeholders, not flight-test values.
    """

    V_T: tuple = (12.0, 30.0)
    alpha: tuple = (math.radians(-10), math.radians(10))
    theta: tuple = (math.radians(-30), math.radians(30))
    q: tuple = (math.radians(-50), math.radians(50))
    delta_e: tuple = (math.radians(-10), math.radians(10))

    CHANNELS = ("V_T", "alpha", "theta", "q")

    def __post_init__(self):
        for name in self.CHANNELS + ("delta_e",):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"envelope channel {name}: min must be below max")

    @classmethod
    def unbounded(cls) -> "Envelope":
        inf = (-math.inf, math.inf)
        return cls(inf, inf, inf, inf, inf)

    def state_bounds(self):
        lo = np.array([getattr(self, c)[0] for c in self.CHANNELS])
        hi = np.array([getattr(self, c)[1] for c in self.CHANNELS])
        return lo, hi

    def violation(self, x, u=None):
        """Name of the first channel out of bounds, or None."""
        for i, name in enumerate(self.CHANNELS):
            lo, hi = getattr(self, name)
            if not lo <= x[i] <= hi:
                return name
        if u is not None:
            lo, hi = self.delta_e
            if not lo <= u <= hi:
                return "delta_e"
        return None


class MonitorResult(NamedTuple):
    ok: bool
    index: int | None = None
    channel: str | None = None


def monitor(states, envelope: Envelope, inputs=None) -> MonitorResult:
    """Scan a trajectory (N x 4 states, optional N inputs) for the first
    envelope violation."""
    x = np.asarray(getattr(states, "x", states), dtype=float)
    if x.ndim != 2 or x.shape[1] != 4:
        raise ValueError("trajectory must be an N x 4 array of longitudinal states")
    if inputs is None and hasattr(states, "delta_e"):
        inputs = states.delta_e
    u = None if inputs is None else np.asarray(inputs, dtype=float)
    for k in range(len(x)):
        hit = envelope.violation(x[k], None if u is None else u[k])
        if hit is not None:
            return MonitorResult(False, k, hit)
    return MonitorResult(True)


@dataclass(frozen=True)
class ManeuverSpec:
    kind: ManeuverKind = ManeuverKind.THREE_TWO_ONE_ONE
    amplitude: float = math.radians(2.0)
    base_interval: float = 0.6
    lead_in: float = 1.0
    total_duration: float = 20.0
    knots: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ManeuverKind(self.kind))
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if not self.base_interval > 0:
            raise ManeuverError("base interval must be positive")
        if self.kind is ManeuverKind.PIECEWISE_CONSTANT and not self.knots:
            raise ManeuverError("piecewise-constant maneuver needs knots")
        if self.lead_in + self.signal_duration > self.total_duration + _EPS:
            raise ManeuverError("total duration shorter than the signal")

    @property
    def signal_duration(self) -> float:
        if self.kind is ManeuverKind.THREE_TWO_ONE_ONE:
            return 7 * self.base_interval
        if self.kind is ManeuverKind.DOUBLET:
            return 2 * self.base_interval
        return len(self.knots) * self.base_interval

    def generate(self, T_s: float, delta_e_trim: float = 0.0,
                 envelope: Envelope | None = None) -> np.ndarray:
        """Absolute elevator series (trim plus excitation).

        Raises ManeuverError if the deflection leaves the envelope limits;
        the signal is never clipped.
        """
        if self.kind is ManeuverKind.THREE_TWO_ONE_ONE:
            dev = generate_3211(self.amplitude, self.base_interval, T_s,
                                self.lead_in, self.total_duration)
        elif self.kind is ManeuverKind.DOUBLET:
            dev = generate_doublet(self.amplitude, self.base_interval, T_s,
                                   self.lead_in, self.total_duration)
        else:
            dev = generate_piecewise(self.knots, self.base_interval, T_s,
                                     self.lead_in, self.total_duration)
        u = delta_e_trim + dev
        if envelope is not None:
            lo, hi = envelope.delta_e
            if u.min() < lo - _EPS or u.max() > hi + _EPS:
                raise ManeuverError("elevator deflection exceeds the envelope limits")
        return u
