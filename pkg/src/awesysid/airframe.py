"""
Airframe constants and the linear aerodynamic coefficient model.

Forces and moments follow the usual body-axis convention (X forward, Z down,
M nose-up positive) and are normalized with the dynamic pressure
q̄ = ½ρV_T². Every angle is in radians.

Default values describe a 36.8 kg rigid-wing AWE glider (5.5 m span) and the
lifting-line a-priori derivative set used to initialize identification.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of the model equations."""


@dataclass(frozen=True)
class AircraftConfig:
    """Mass, inertia and reference geometry (SI units)."""

    mass: float = 36.8
    J_x: float = 25.0
    J_y: float = 32.0
    J_z: float = 56.0
    J_xz: float = 0.47
    wing_area: float = 3.0
    wing_span: float = 5.5
    chord: float = 0.55
    air_density: float = 1.225
    gravity: float = 9.81

    def __post_init__(self):
        positive = ("mass", "J_x", "J_y", "J_z", "wing_area", "wing_span",
                    "chord", "air_density", "gravity")
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be positive, got {value!r}")
        if not math.isfinite(self.J_xz):
            raise DomainError("J_xz must be finite")
        if self.J_x * self.J_z - self.J_xz ** 2 <= 0:
            raise DomainError("inertia tensor is not positive definite")

    def dynamic_pressure(self, V_T):
        return 0.5 * self.air_density * np.square(V_T)


LON_NAMES = ("CX0", "CXa", "CXq", "CXde",
             "CZ0", "CZa", "CZq", "CZde",
             "Cm0", "Cma", "Cmq", "Cmde")

LAT_NAMES = ("CYb", "CYp", "CYr", "CYda", "CYdr",
             "Clb", "Clp", "Clr", "Clda", "Cldr",
             "Cnb", "Cnp", "Cnr", "Cnda", "Cndr")


@dataclass(frozen=True)
class AeroDerivatives:
    """Dimensionless aerodynamic derivatives.

    The twelve longitudinal fields default to the a-priori (lifting line)
    model. The lateral set is optional; it is either entirely absent
    (all ``None``) or entirely present.
    """

    CX0: float = -0.033
    CXa: float = 0.409
    CXq: float = -0.603
    CXde: float = -0.011
    CZ0: float = -0.528
    CZa: float = -4.225
    CZq: float = -7.500
    CZde: float = -0.310
    Cm0: float = -0.031
    Cma: float = -0.607
    Cmq: float = -11.300
    Cmde: float = -1.420

    CYb: float | None = None
    CYp: float | None = None
    CYr: float | None = None
    CYda: float | None = None
    CYdr: float | None = None
    Clb: float | None = None
    Clp: float | None = None
    Clr: float | None = None
    Clda: float | None = None
    Cldr: float | None = None
    Cnb: float | None = None
    Cnp: float | None = None
    Cnr: float | None = None
    Cnda: float | None = None
    Cndr: float | None = None

    def __post_init__(self):
        for name in LON_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        lat = [getattr(self, n) for n in LAT_NAMES]
        present = [v is not None for v in lat]
        if any(present) and not all(present):
            missing = [n for n, p in zip(LAT_NAMES, present) if not p]
            raise DomainError(f"incomplete lateral derivative set, missing {missing}")
        if all(present) and not all(math.isfinite(v) for v in lat):
            raise DomainError("lateral derivatives must be finite")

    @property
    def has_lateral(self) -> bool:
        return self.CYb is not None

    def lon_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in LON_NAMES], dtype=float)

    def with_lon(self, values) -> "AeroDerivatives":
        values = np.asarray(values, dtype=float)
        return replace(self, **{n: float(v) for n, v in zip(LON_NAMES, values)})

    @classmethod
    def from_lon_array(cls, values) -> "AeroDerivatives":
        return cls().with_lon(values)

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def plausibility_warnings(self) -> list[str]:
        """Sign checks that a physically sensible set is expected to pass."""
        issues = []
        if self.CZa >= 0:
            issues.append("CZa >= 0 (lift slope of the wrong sign)")
        if self.Cma >= 0:
            issues.append("Cma >= 0 (statically unstable in pitch)")
        if self.Cmq >= 0:
            issues.append("Cmq >= 0 (no pitch damping)")
        return issues

    def warn_if_implausible(self):
        for msg in self.plausibility_warnings():
            warnings.warn(msg, stacklevel=2)


# Table of the identified model used as synthetic ground truth. The fixed
# entries (CXq, CXde, CZq) equal the a-priori values; CX0 is set to a small
# drag term so that relative errors stay defined.
SYNTHETIC_TRUTH = AeroDerivatives(
    CX0=-0.025, CXa=0.668, CXq=-0.603, CXde=-0.011,
    CZ0=-0.561, CZa=-5.012, CZq=-7.500, CZde=0.122,
    Cm0=0.061, Cma=-0.779, Cmq=-24.923, Cmde=-1.004,
)


class AeroAngles(NamedTuple):
    alpha: float
    beta: float
    V_T: float


class BodyRates(NamedTuple):
    p: float = 0.0
    q: float = 0.0
    r: float = 0.0


class ControlSurfaces(NamedTuple):
    delta_a: float = 0.0
    delta_e: float = 0.0
    delta_r: float = 0.0


class Coefficients(NamedTuple):
    C_X: float
    C_Y: float
    C_Z: float
    C_l: float
    C_m: float
    C_n: float


class ForcesMoments(NamedTuple):
    X: float
    Y: float
    Z: float
    L: float
    M: float
    N: float


def _check_airspeed(V_T):
    if np.any(np.asarray(V_T) <= 0):
        raise DomainError(f"airspeed must be positive, got {V_T!r}")


def normalized_rates(rates: BodyRates, V_T, config: AircraftConfig):
    """Return (p̂, q̂, r̂) = (b·p, c̄·q, b·r) / (2·V_T)."""
    _check_airspeed(V_T)
    p, q, r = rates
    return (config.wing_span * p / (2 * V_T),
            config.chord * q / (2 * V_T),
            config.wing_span * r / (2 * V_T))


def coefficients(derivs: AeroDerivatives, angles: AeroAngles, rates: BodyRates,
                 surfaces: ControlSurfaces, config: AircraftConfig) -> Coefficients:
    alpha, beta, V_T = angles
    p_hat, q_hat, r_hat = normalized_rates(rates, V_T, config)
    da, de, dr = surfaces
    d = derivs

    C_X = d.CXa * alpha + d.CXq * q_hat + d.CXde * de + d.CX0
    C_Z = d.CZa * alpha + d.CZq * q_hat + d.CZde * de + d.CZ0
    C_m = d.Cma * alpha + d.Cmq * q_hat + d.Cmde * de + d.Cm0
    if d.has_lateral:
        C_Y = d.CYb * beta + d.CYp * p_hat + d.CYr * r_hat + d.CYda * da + d.CYdr * dr
        C_l = d.Clb * beta + d.Clp * p_hat + d.Clr * r_hat + d.Clda * da + d.Cldr * dr
        C_n = d.Cnb * beta + d.Cnp * p_hat + d.Cnr * r_hat + d.Cnda * da + d.Cndr * dr
    else:
        C_Y = C_l = C_n = 0.0 * alpha
    return Coefficients(C_X, C_Y, C_Z, C_l, C_m, C_n)


def forces_moments(coeffs: Coefficients, V_T, config: AircraftConfig) -> ForcesMoments:
    if np.any(np.asarray(V_T) < 0):
        raise DomainError("airspeed must be non-negative")
    qS = config.dynamic_pressure(V_T) * config.wing_area
    C_X, C_Y, C_Z, C_l, C_m, C_n = coeffs
    return ForcesMoments(qS * C_X, qS * C_Y, qS * C_Z,
                         qS * config.wing_span * C_l,
                         qS * config.chord * C_m,
                         qS * config.wing_span * C_n)


def gravity_wind_axes(angles: AeroAngles, phi, theta, g_D):
    """Gravity acceleration projected on the wind axes.

    Returns (G_VT, G_beta, G_alpha) in m/s². The airspeed component uses
    sβ·sφ·cθ; the projection of the body gravity vector onto the wind x-axis
    requires the cosine of pitch there (with sθ the vector norm is not kept).
    """
    alpha, beta = angles[0], angles[1]
    sa, ca = np.sin(alpha), np.cos(alpha)
    sb, cb = np.sin(beta), np.cos(beta)
    sp, cp = np.sin(phi), np.cos(phi)
    st, ct = np.sin(theta), np.cos(theta)
    G_VT = g_D * (sb * sp * ct - ca * cb * st + sa * cb * cp * ct)
    G_beta = g_D * (ca * sb * st + cb * sp * ct - sa * sb * cp * ct)
    G_alpha = g_D * (sa * st + ca * cp * ct)
    return G_VT, G_beta, G_alpha


DIMENSIONAL_NAMES = ("X_V", "X_alpha", "X_q", "X_de",
                     "Z_V", "Z_alpha/V", "Z_q", "Z_de/V",
                     "M_V", "M_alpha", "M_q", "M_de")


@dataclass(frozen=True)
class DimensionalDerivatives:
    """Entries of the longitudinal state-space matrices.

    Z-row entries are already divided by the trim airspeed (they belong to
    the α̇ equation), and ``Z_q`` includes the kinematic unit term.
    """

    X_V: float
    X_alpha: float
    X_q: float
    X_de: float
    Z_V: float
    Z_alpha_V: float
    Z_q: float
    Z_de_V: float
    M_V: float
    M_alpha: float
    M_q: float
    M_de: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    def as_dict(self) -> dict:
        return dict(zip(DIMENSIONAL_NAMES, self.as_array().tolist()))


def _conversion_gains(V_Te, config: AircraftConfig) -> np.ndarray:
    """Per-parameter factors k such that dimensional = offset + k·dimensionless."""
    _check_airspeed(V_Te)
    m, Jy, c = config.mass, config.J_y, config.chord
    rho, S = config.air_density, config.wing_area
    qS = config.dynamic_pressure(V_Te) * S
    return np.array([
        rho * V_Te * S / m,             # X_V   <- CX0
        qS / m,                         # X_a   <- CXa
        qS * c / (2 * V_Te * m),        # X_q   <- CXq
        qS / m,                         # X_de  <- CXde
        rho * S / m,                    # Z_V   <- CZ0
        qS / (m * V_Te),                # Z_a/V <- CZa
        qS * c / (2 * V_Te ** 2 * m),   # Z_q   <- CZq (plus 1)
        qS / (m * V_Te),                # Z_de/V <- CZde
        0.0,                            # M_V   <- Cm0 (no speed term)
        qS * c / Jy,                    # M_a   <- Cma
        qS * c ** 2 / (2 * V_Te * Jy),  # M_q   <- Cmq
        qS * c / Jy,                    # M_de  <- Cmde
    ])


_OFFSETS = np.array([0, 0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 0])


def dimensionalize(derivs: AeroDerivatives, V_Te, config: AircraftConfig) -> DimensionalDerivatives:
    gains = _conversion_gains(V_Te, config)
    return DimensionalDerivatives(*(_OFFSETS + gains * derivs.lon_array()))


def dimensionless_from(dim: DimensionalDerivatives, V_Te, config: AircraftConfig,
                       Cm0: float = 0.0) -> AeroDerivatives:
    """Inverse of :func:`dimensionalize`.

    M_V carries no information about C_m0, so it has to be supplied.
    """
    gains = _conversion_gains(V_Te, config)
    values = dim.as_array() - _OFFSETS
    out = np.empty(12)
    nz = gains != 0
    out[nz] = values[nz] / gains[nz]
    out[~nz] = Cm0
    return AeroDerivatives.from_lon_array(out)
