"""Model-quality metrics: residual statistics, Theil inequality coefficients,
modal comparison and Phugoid period extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .airframe import AeroDerivatives, AircraftConfig
from .dynamics import STATE_LABELS, linearize_lon, modal_analysis, trim

TIC_THRESHOLD = 0.25


class InsufficientDataError(ValueError):
    pass


def _rms(x):
    return np.sqrt(np.mean(np.square(x), axis=0))


@dataclass
class TicReport:
    values: dict
    threshold: float = TIC_THRESHOLD
    diagnostics: list = field(default_factory=list)

    def __getitem__(self, channel) -> float:
        return self.values[channel]

    @property
    def flagged(self) -> list:
        """Channels whose TIC exceeds the accuracy threshold."""
        return [c for c, v in self.values.items() if not math.isnan(v) and v > self.threshold]

    @property
    def accurate(self) -> bool:
        return not self.flagged and not any(math.isnan(v) for v in self.values.values())

    def to_csv(self) -> str:
        names = list(self.values)
        cells = ["" if math.isnan(self.values[c]) else f"{self.values[c]:.6g}" for c in names]
        return ",".join(["metric"] + names) + "\n" + ",".join(["TIC"] + cells) + "\n"


def tic(measured, predicted, channels=STATE_LABELS) -> TicReport:
    """Theil inequality coefficient per channel.

    TIC = rms(y_meas - y_pred) / (rms(y_meas) + rms(y_pred)). A channel where
    both signals vanish has no defined value and is reported as NaN.
    """
    ym = np.asarray(measured, dtype=float)
    yp = np.asarray(predicted, dtype=float)
    if ym.shape != yp.shape:
        raise ValueError("measured and predicted series differ in shape")
    if ym.ndim == 1:
        ym, yp = ym[:, None], yp[:, None]
        channels = channels if len(channels) == 1 else ("value",)
    if len(ym) < 1:
        raise ValueError("empty series")
    if len(channels) != ym.shape[1]:
        channels = tuple(f"ch{i}" for i in range(ym.shape[1]))
    num = _rms(ym - yp)
    den = _rms(ym) + _rms(yp)
    values, diag = {}, []
    for name, n, d in zip(channels, num, den):
        if d == 0:
            values[name] = math.nan
            diag.append(f"{name}: both signals are identically zero, TIC undefined")
        else:
            values[name] = float(n / d)
    return TicReport(values, diagnostics=diag)


@dataclass
class ChannelStats:
    mean: float
    std: float
    counts: np.ndarray
    edges: np.ndarray


@dataclass
class ResidualStats:
    channels: dict

    def __getitem__(self, channel) -> ChannelStats:
        return self.channels[channel]


def residual_stats(residuals, channels=STATE_LABELS, bins: int = 30) -> ResidualStats:
    """Mean, sample std and a 30-bin histogram over mean +- 4 std per channel."""
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
        channels = channels if len(channels) == 1 else ("value",)
    if len(r) < 2:
        raise InsufficientDataError("at least two residual samples are needed")
    out = {}
    for i, name in enumerate(channels):
        x = r[:, i]
        mu = float(np.mean(x))
        sd = float(np.std(x, ddof=1))
        # keep the bin range wider than float spacing for (near) constant input
        half = max(4 * sd, 1e-12 * max(1.0, abs(mu)))
        counts, edges = np.histogram(x, bins=bins, range=(mu - half, mu + half))
        out[name] = ChannelStats(mu, sd, counts, edges)
    return ResidualStats(out)


def phugoid_period(V_T, T_s: float) -> float:
    """Oscillation period from zero crossings of the mean-removed airspeed.

    Crossing times are located by linear interpolation; consecutive
    crossings are half a period apart.
    """
    v = np.asarray(V_T, dtype=float)
    v = v - v.mean()
    s = np.signbit(v)
    idx = np.nonzero(s[1:] != s[:-1])[0]
    if len(idx) < 2:
        raise InsufficientDataError("fewer than two zero crossings in the airspeed trace")
    frac = v[idx] / (v[idx] - v[idx + 1])
    times = (idx + frac) * T_s
    return float(2 * np.mean(np.diff(times)))


@dataclass
class ModeComparison:
    rows: list   # (mode, quantity, a-priori, identified, relative change)

    def to_csv(self) -> str:
        lines = ["mode,quantity,a_priori,identified,rel_change"]
        for r in self.rows:
            lines.append(",".join([r[0], r[1]] + [f"{v:.6g}" for v in r[2:]]))
        return "\n".join(lines) + "\n"


def compare_modes(a_priori: AeroDerivatives, identified: AeroDerivatives, V_Te: float,
                  config: AircraftConfig | None = None) -> ModeComparison:
    """Natural frequency, damping and metrics of both longitudinal modes,
    each model linearized at its own trim for the same airspeed."""
    config = config or AircraftConfig()
    reps = []
    for d in (a_priori, identified):
        tp = trim(V_Te, d, config)
        reps.append(modal_analysis(linearize_lon(tp, d, config)))
    rows = []
    for name in ("Short-period", "Phugoid"):
        try:
            m0, m1 = reps[0][name], reps[1][name]
        except KeyError:
            continue
        for q in ("omega_n", "damping", "tau", "overshoot", "period"):
            a, b = getattr(m0, q), getattr(m1, q)
            if a is None or b is None:
                continue
            rel = (b - a) / a if a else math.nan
            rows.append((name, q, float(a), float(b), float(rel)))
    return ModeComparison(rows)
