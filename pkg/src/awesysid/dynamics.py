"""
Nonlinear flight dynamics in wind axes, trim, linearization and modes.

The longitudinal model has states x = [V_T, alpha, theta, q] and the
elevator deflection as its only input. Internally the twelve longitudinal
derivatives travel as a flat array ordered like ``airframe.LON_NAMES``;
all kernels broadcast over leading axes so that many shooting nodes (or
parameter perturbations) are evaluated in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .airframe import (
    AeroAngles,
    AeroDerivatives,
    AircraftConfig,
    BodyRates,
    ControlSurfaces,
    DomainError,
    coefficients,
    dimensionalize,
    forces_moments,
    gravity_wind_axes,
)

N_STATES = 4
N_PARAMS = 12
STATE_LABELS = ("V_T", "alpha", "theta", "q")


class LonState(NamedTuple):
    V_T: float
    alpha: float
    theta: float
    q: float


class FullState(NamedTuple):
    V_T: float
    beta: float
    alpha: float
    phi: float
    theta: float
    psi: float
    p: float
    q: float
    r: float


class SingularityError(DomainError):
    """cos(beta) or cos(theta) vanishes in the wind-axis equations."""


class TrimError(RuntimeError):
    def __init__(self, message, residual_norm):
        super().__init__(message)
        self.residual_norm = residual_norm


def _as_params(p):
    if isinstance(p, AeroDerivatives):
        return p.lon_array()
    return np.asarray(p, dtype=float)


# ---------------------------------------------------------------------------
# Longitudinal kernels


def lon_rhs(x, u, p, config: AircraftConfig):
    """Vectorized longitudinal state derivative.

    x: (..., 4), u: (...), p: (12,) or (..., 12). Returns (..., 4).
    """
    x = np.asarray(x, dtype=float)
    p = _as_params(p)
    V, a, th, q = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    m, g, c = config.mass, config.gravity, config.chord
    k = 0.5 * config.air_density * V * V * config.wing_area
    qh = c * q / (2 * V)
    P = p
    CX = P[..., 0] + P[..., 1] * a + P[..., 2] * qh + P[..., 3] * u
    CZ = P[..., 4] + P[..., 5] * a + P[..., 6] * qh + P[..., 7] * u
    Cm = P[..., 8] + P[..., 9] * a + P[..., 10] * qh + P[..., 11] * u
    sa, ca = np.sin(a), np.cos(a)
    gam = th - a
    out = np.empty(np.broadcast(V, CX).shape + (4,))
    out[..., 0] = k * (CX * ca + CZ * sa) / m - g * np.sin(gam)
    out[..., 1] = k * (CZ * ca - CX * sa) / (m * V) + g * np.cos(gam) / V + q
    out[..., 2] = q
    out[..., 3] = k * c * Cm / config.J_y
    return out


def lon_jacobians(x, u, p, config: AircraftConfig):
    """State derivative together with its partial derivatives.

    Returns ``(f, f_x, f_p, f_u)`` with shapes (..., 4), (..., 4, 4),
    (..., 4, 12) and (..., 4). ``p`` must be a single (12,) vector.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = _as_params(p)
    V, a, th, q = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    u = np.broadcast_to(u, V.shape)
    m, g, c, Jy = config.mass, config.gravity, config.chord, config.J_y
    k = 0.5 * config.air_density * V * V * config.wing_area
    k_V = 2 * k / V
    qh = c * q / (2 * V)
    qh_V = -qh / V
    qh_q = c / (2 * V)

    CX0, CXa, CXq, CXde, CZ0, CZa, CZq, CZde, Cm0, Cma, Cmq, Cmde = p
    CX = CX0 + CXa * a + CXq * qh + CXde * u
    CZ = CZ0 + CZa * a + CZq * qh + CZde * u
    Cm = Cm0 + Cma * a + Cmq * qh + Cmde * u
    sa, ca = np.sin(a), np.cos(a)
    gam = th - a
    sg, cg = np.sin(gam), np.cos(gam)

    A = k * (CX * ca + CZ * sa)
    B = k * (CZ * ca - CX * sa)
    A_V = k_V * (CX * ca + CZ * sa) + k * qh_V * (CXq * ca + CZq * sa)
    B_V = k_V * (CZ * ca - CX * sa) + k * qh_V * (CZq * ca - CXq * sa)
    A_a = k * (CXa * ca - CX * sa + CZa * sa + CZ * ca)
    B_a = k * (CZa * ca - CZ * sa - CXa * sa - CX * ca)
    A_q = k * qh_q * (CXq * ca + CZq * sa)
    B_q = k * qh_q * (CZq * ca - CXq * sa)
    A_u = k * (CXde * ca + CZde * sa)
    B_u = k * (CZde * ca - CXde * sa)

    shape = V.shape
    f = np.empty(shape + (4,))
    f[..., 0] = A / m - g * sg
    f[..., 1] = B / (m * V) + g * cg / V + q
    f[..., 2] = q
    f[..., 3] = k * c * Cm / Jy

    fx = np.zeros(shape + (4, 4))
    fx[..., 0, 0] = A_V / m
    fx[..., 0, 1] = A_a / m + g * cg
    fx[..., 0, 2] = -g * cg
    fx[..., 0, 3] = A_q / m
    fx[..., 1, 0] = B_V / (m * V) - B / (m * V * V) - g * cg / (V * V)
    fx[..., 1, 1] = B_a / (m * V) + g * sg / V
    fx[..., 1, 2] = -g * sg / V
    fx[..., 1, 3] = B_q / (m * V) + 1.0
    fx[..., 2, 3] = 1.0
    fx[..., 3, 0] = c * (k_V * Cm + k * Cmq * qh_V) / Jy
    fx[..., 3, 1] = k * c * Cma / Jy
    fx[..., 3, 3] = k * c * Cmq * qh_q / Jy

    regressors = np.stack([np.ones(shape), a, qh, u], axis=-1)  # (..., 4)
    fp = np.zeros(shape + (4, 12))
    fp[..., 0, 0:4] = (k * ca / m)[..., None] * regressors
    fp[..., 0, 4:8] = (k * sa / m)[..., None] * regressors
    fp[..., 1, 0:4] = (-k * sa / (m * V))[..., None] * regressors
    fp[..., 1, 4:8] = (k * ca / (m * V))[..., None] * regressors
    fp[..., 3, 8:12] = (k * c / Jy)[..., None] * regressors

    fu = np.zeros(shape + (4,))
    fu[..., 0] = A_u / m
    fu[..., 1] = B_u / (m * V)
    fu[..., 3] = k * c * Cmde / Jy
    return f, fx, fp, fu


def lon_derivative(state: LonState, delta_e: float, derivs: AeroDerivatives,
                   config: AircraftConfig) -> LonState:
    """Time derivative of the longitudinal state for steady wing-level flight.

    Raises DomainError for non-positive airspeed (the integration abort
    signal used by :func:`simulate`).
    """
    if not state[0] > 0:
        raise DomainError(f"airspeed must be positive, got {state[0]!r}")
    return LonState(*lon_rhs(np.asarray(state, float), delta_e, derivs, config).tolist())


# ---------------------------------------------------------------------------
# Full nine-state model


def full_derivative(state: FullState, surfaces: ControlSurfaces,
                    derivs: AeroDerivatives, config: AircraftConfig) -> FullState:
    V, beta, alpha, phi, theta, psi, p, q, r = state
    cb, ct = math.cos(beta), math.cos(theta)
    if abs(cb) < 1e-12 or abs(ct) < 1e-12:
        raise SingularityError("cos(beta) or cos(theta) is zero")
    if not V > 0:
        raise DomainError(f"airspeed must be positive, got {V!r}")
    m = config.mass
    Jx, Jy, Jz, Jxz = config.J_x, config.J_y, config.J_z, config.J_xz

    coeffs = coefficients(derivs, AeroAngles(alpha, beta, V), BodyRates(p, q, r),
                          surfaces, config)
    X, Y, Z, L, M, N = forces_moments(coeffs, V, config)
    G_V, G_b, G_a = gravity_wind_axes((alpha, beta), phi, theta, config.gravity)

    sa, ca = math.sin(alpha), math.cos(alpha)
    sb = math.sin(beta)
    sp, cp = math.sin(phi), math.cos(phi)
    tt = math.tan(theta)

    V_dot = (Y * sb + X * ca * cb + Z * cb * sa) / m + G_V
    beta_dot = (Y * cb - X * ca * sb - Z * sa * sb) / (m * V) + G_b / V - r * ca + p * sa
    alpha_dot = ((Z * ca - X * sa) / (m * V * cb) + G_a / (V * cb)
                 + (q * cb - (p * ca + r * sa) * sb) / cb)
    phi_dot = p + r * cp * tt + q * sp * tt
    theta_dot = q * cp - r * sp
    psi_dot = (q * sp + r * cp) / ct

    # p_dot and r_dot are coupled through J_xz; solve the 2x2 system.
    rhs_p = -q * r * (Jz - Jy) / Jx + q * p * Jxz / Jx + L / Jx
    rhs_r = -p * q * (Jy - Jx) / Jz - q * r * Jxz / Jz + N / Jz
    kp, kr = Jxz / Jx, Jxz / Jz
    det = 1.0 - kp * kr
    p_dot = (rhs_p + kp * rhs_r) / det
    r_dot = (rhs_r + kr * rhs_p) / det
    q_dot = -p * r * (Jx - Jz) / Jy - (p * p - r * r) * Jxz / Jy + M / Jy

    return FullState(V_dot, beta_dot, alpha_dot, phi_dot, theta_dot, psi_dot,
                     p_dot, q_dot, r_dot)


# ---------------------------------------------------------------------------
# Integration


def rk4(f: Callable, x, h: float):
    """One classical Runge-Kutta step of x' = f(x)."""
    if not h > 0:
        raise ValueError("step size must be positive")
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step(state, delta_e, derivs, config: AircraftConfig, h: float, substeps: int = 1):
    """Advance the longitudinal state over ``h`` seconds, input held constant."""
    p = _as_params(derivs)
    x = np.asarray(state, dtype=float)
    hs = h / substeps
    for _ in range(substeps):
        x = rk4(lambda z: lon_rhs(z, delta_e, p, config), x, hs)
    return x


def rk4_step_sens(x, u, p, config: AircraftConfig, h: float, substeps: int = 1,
                  S=None):
    """RK4 step of the state and its sensitivity matrix.

    The sensitivity S = d x / d (x_start, p) has shape (..., 4, 16); if not
    given it starts as [I | 0], so the result is the Jacobian of the discrete
    one-interval map with respect to the start node and the parameters.
    Applying RK4 to the variational equations gives the exact derivative of
    the RK4 map, so no extra discretization error is introduced.
    """
    x = np.asarray(x, dtype=float)
    p = _as_params(p)
    if S is None:
        S = np.zeros(x.shape[:-1] + (4, 4 + N_PARAMS))
        S[..., :, :4] = np.eye(4)

    def aug(z, Sz):
        f, fx, fp, _ = lon_jacobians(z, u, p, config)
        dS = fx @ Sz
        dS[..., :, 4:] += fp
        return f, dS

    hs = h / substeps
    for _ in range(substeps):
        k1, K1 = aug(x, S)
        k2, K2 = aug(x + 0.5 * hs * k1, S + 0.5 * hs * K1)
        k3, K3 = aug(x + 0.5 * hs * k2, S + 0.5 * hs * K2)
        k4, K4 = aug(x + hs * k3, S + hs * K3)
        x = x + (hs / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        S = S + (hs / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
    return x, S


@dataclass
class Trajectory:
    t: np.ndarray
    delta_e: np.ndarray
    x: np.ndarray
    aborted: bool = False
    abort_index: int | None = None
    abort_reason: str = ""

    def __len__(self):
        return len(self.t)


def simulate(x0, inputs, T_s: float, derivs, config: AircraftConfig,
             substeps: int = 1, envelope=None) -> Trajectory:
    """Integrate the longitudinal model on a uniform grid.

    ``inputs[k]`` is held over [t_k, t_k+1); the returned trajectory has one
    state per input sample, starting with ``x0``. The run stops early (and the
    trajectory is truncated) if the airspeed turns non-positive, a state
    becomes non-finite, or the optional envelope is violated.
    """
    if not T_s > 0:
        raise ValueError("sample period must be positive")
    u = np.asarray(inputs, dtype=float)
    n = len(u)
    p = _as_params(derivs)
    x = np.empty((n, 4))
    x[0] = np.asarray(x0, dtype=float)
    t = np.arange(n) * T_s

    def bad(k):
        xk = x[k]
        if not np.all(np.isfinite(xk)) or xk[0] <= 0:
            return "non-finite state or non-positive airspeed"
        if envelope is not None:
            hit = envelope.violation(xk, u[k])
            if hit is not None:
                return f"envelope violated on {hit}"
        return ""

    for k in range(n):
        reason = bad(k)
        if reason:
            return Trajectory(t[:k], u[:k], x[:k], True, k, reason)
        if k + 1 < n:
            x[k + 1] = rk4_step(x[k], u[k], p, config, T_s, substeps)
    return Trajectory(t, u, x)


# ---------------------------------------------------------------------------
# Trim


@dataclass(frozen=True)
class TrimPoint:
    V_Te: float
    alpha_e: float
    theta_e: float
    delta_e_trim: float
    residual_norm: float

    @property
    def state(self) -> np.ndarray:
        return np.array([self.V_Te, self.alpha_e, self.theta_e, 0.0])


def trim(V_Te: float, derivs, config: AircraftConfig, tol: float = 1e-10,
         max_iter: int = 50) -> TrimPoint:
    """Steady wing-level glide at airspeed ``V_Te``.

    Solves V̇ = α̇ = q̇ = 0 for (α, θ, δ_e) with q = 0 by damped Newton,
    starting from zero.
    """
    if not V_Te > 0:
        raise DomainError("trim airspeed must be positive")
    p = _as_params(derivs)
    z = np.zeros(3)  # alpha, theta, delta_e

    def residual(z):
        x = np.array([V_Te, z[0], z[1], 0.0])
        f, fx, _, fu = lon_jacobians(x, z[2], p, config)
        res = f[[0, 1, 3]]
        jac = np.column_stack([fx[[0, 1, 3], 1], fx[[0, 1, 3], 2], fu[[0, 1, 3]]])
        return res, jac

    res, jac = residual(z)
    norm = np.linalg.norm(res)
    for _ in range(max_iter):
        if norm < tol:
            break
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise TrimError("singular trim Jacobian", norm) from None
        t = 1.0
        while t > 1e-6:
            z_new = z + t * step
            res_new, jac_new = residual(z_new)
            norm_new = np.linalg.norm(res_new)
            if norm_new < norm or norm_new < tol:
                break
            t *= 0.5
        z, res, jac, norm = z_new, res_new, jac_new, norm_new
    if not norm < tol:
        raise TrimError(f"trim did not converge (residual {norm:.3e})", norm)
    return TrimPoint(float(V_Te), float(z[0]), float(z[1]), float(z[2]), float(norm))


# ---------------------------------------------------------------------------
# Linear models


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    state_labels: tuple
    input_labels: tuple
    kind: str = "lon"

    def __post_init__(self):
        n = len(self.state_labels)
        if self.A.shape != (n, n) or self.B.shape != (n, len(self.input_labels)):
            raise ValueError("matrix dimensions do not match labels")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite entries in linear model")


def lon_matrices_from_dimensional(dim, theta_e: float, g_D: float = 9.81) -> LinearModel:
    """Assemble A_lon/B_lon in the tabulated layout.

    The α̇-row gravity entry is -g·sin(θ_e) as tabulated, i.e. without the
    1/V_Te factor that the nonlinear equations imply (see
    :func:`compare_linearizations`).
    """
    d = dim
    A = np.array([
        [d.X_V, d.X_alpha, -g_D * math.cos(theta_e), d.X_q],
        [d.Z_V, d.Z_alpha_V, -g_D * math.sin(theta_e), d.Z_q],
        [0.0, 0.0, 0.0, 1.0],
        [d.M_V, d.M_alpha, 0.0, d.M_q],
    ])
    B = np.array([[d.X_de], [d.Z_de_V], [0.0], [d.M_de]])
    return LinearModel(A, B, STATE_LABELS, ("delta_e",), "lon")


def linearize_lon(trim_point: TrimPoint, derivs: AeroDerivatives,
                  config: AircraftConfig) -> LinearModel:
    dim = dimensionalize(derivs, trim_point.V_Te, config)
    return lon_matrices_from_dimensional(dim, trim_point.theta_e, config.gravity)


def jacobian_lon(trim_point: TrimPoint, derivs, config: AircraftConfig) -> LinearModel:
    """Exact Jacobian of the nonlinear longitudinal model at trim."""
    _, fx, _, fu = lon_jacobians(trim_point.state, trim_point.delta_e_trim,
                                 _as_params(derivs), config)
    return LinearModel(fx, fu[:, None], STATE_LABELS, ("delta_e",), "lon")


def numerical_jacobian(f: Callable, x0, u0, rel_step: float = 1e-6):
    """Central-difference Jacobians (A, B) of f(x, u) at (x0, u0)."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    fx0 = np.asarray(f(x0, u0))
    A = np.empty((fx0.size, x0.size))
    B = np.empty((fx0.size, u0.size))
    for j in range(x0.size):
        h = rel_step * max(1.0, abs(x0[j]))
        e = np.zeros_like(x0)
        e[j] = h
        A[:, j] = (np.asarray(f(x0 + e, u0)) - np.asarray(f(x0 - e, u0))) / (2 * h)
    for j in range(u0.size):
        h = rel_step * max(1.0, abs(u0[j]))
        e = np.zeros_like(u0)
        e[j] = h
        B[:, j] = (np.asarray(f(x0, u0 + e)) - np.asarray(f(x0, u0 - e))) / (2 * h)
    return A, B


@dataclass
class LinearizationComparison:
    tabulated: LinearModel
    exact: LinearModel
    abs_diff: np.ndarray
    rel_diff: np.ndarray

    def worst(self):
        idx = np.unravel_index(np.nanargmax(self.rel_diff), self.rel_diff.shape)
        return self.tabulated.state_labels[idx[0]], self.tabulated.state_labels[idx[1]], \
            float(self.rel_diff[idx])


def compare_linearizations(trim_point: TrimPoint, derivs, config) -> LinearizationComparison:
    """Entry-wise difference between the tabulated A_lon and the exact Jacobian."""
    tab = linearize_lon(trim_point, derivs, config)
    ex = jacobian_lon(trim_point, derivs, config)
    diff = np.abs(tab.A - ex.A)
    scale = np.maximum(np.abs(ex.A), np.abs(tab.A))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, diff / scale, 0.0)
    return LinearizationComparison(tab, ex, diff, rel)


LAT_STATE_LABELS = ("beta", "phi", "p", "r")


def linearize_lat(trim_point: TrimPoint, derivs: AeroDerivatives,
                  config: AircraftConfig) -> LinearModel:
    """Lateral matrices in the tabulated layout, with J_xz folded into the
    rolling and yawing rows (primed derivatives)."""
    if not derivs.has_lateral:
        raise NotImplementedError("lateral derivative set is not available")
    V = trim_point.V_Te
    th = trim_point.theta_e
    d = derivs
    m, g = config.mass, config.gravity
    b = config.wing_span
    Jx, Jz, Jxz = config.J_x, config.J_z, config.J_xz
    qS = config.dynamic_pressure(V) * config.wing_area
    rate = b / (2 * V)

    Y_b, Y_p, Y_r = qS * d.CYb / m, qS * rate * d.CYp / m, qS * rate * d.CYr / m
    Y_da, Y_dr = qS * d.CYda / m, qS * d.CYdr / m

    def lmn(Cb, Cp, Cr, Cda, Cdr, J):
        return np.array([Cb, Cp * rate, Cr * rate, Cda, Cdr]) * qS * b / J

    Lv = lmn(d.Clb, d.Clp, d.Clr, d.Clda, d.Cldr, Jx)
    Nv = lmn(d.Cnb, d.Cnp, d.Cnr, d.Cnda, d.Cndr, Jz)
    den = 1.0 - Jxz ** 2 / (Jx * Jz)
    Lp = (Lv + (Jxz / Jx) * Nv) / den
    Np = (Nv + (Jxz / Jz) * Lv) / den

    A = np.array([
        [Y_b / V, g * math.cos(th), Y_p, Y_r - V],
        [0.0, 0.0, 1.0, math.tan(th)],
        [Lp[0], 0.0, Lp[1], Lp[2]],
        [Np[0], 0.0, Np[1], Np[2]],
    ])
    B = np.array([
        [Y_da / V, Y_dr / V],
        [0.0, 0.0],
        [Lp[3], Lp[4]],
        [Np[3], Np[4]],
    ])
    return LinearModel(A, B, LAT_STATE_LABELS, ("delta_a", "delta_r"), "lat")


# ---------------------------------------------------------------------------
# Modal analysis


@dataclass(frozen=True)
class Mode:
    name: str
    eigenvalue: complex
    omega_n: float
    damping: float
    tau: float
    overshoot: float
    period: float | None


def mode_metrics(omega_n: float, damping: float):
    """Time constant, percent overshoot and oscillation period of a mode.

    tau = 1/omega_n. The period is ``None`` unless 0 <= damping < 1.
    """
    tau = 1.0 / omega_n
    if damping >= 1.0:
        return tau, 0.0, None
    root = math.sqrt(1.0 - damping * damping)
    overshoot = 100.0 * math.exp(-math.pi * damping / root)
    period = 2.0 * math.pi / (omega_n * root)
    return tau, overshoot, period


@dataclass
class ModeReport:
    modes: list = field(default_factory=list)

    def __getitem__(self, name) -> Mode:
        for mode in self.modes:
            if mode.name == name:
                return mode
        raise KeyError(name)

    def names(self):
        return [m.name for m in self.modes]


def modal_analysis(model: LinearModel | np.ndarray) -> ModeReport:
    A = model.A if isinstance(model, LinearModel) else np.asarray(model)
    kind = model.kind if isinstance(model, LinearModel) else "lon"
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("state matrix must be square")
    lam = np.linalg.eigvals(A)
    oscillatory = sorted((l for l in lam if l.imag > 1e-12), key=abs, reverse=True)
    real = sorted((l for l in lam if abs(l.imag) <= 1e-12), key=abs, reverse=True)

    if kind == "lon" and len(oscillatory) == 2:
        osc_names = ["Short-period", "Phugoid"]
    else:
        osc_names = [f"oscillatory-{i + 1}" for i in range(len(oscillatory))]

    modes = []
    for name, l in zip(osc_names, oscillatory):
        wn = abs(l)
        zeta = -l.real / wn
        tau, over, period = mode_metrics(wn, zeta)
        modes.append(Mode(name, complex(l), wn, zeta, tau, over, period))
    for i, l in enumerate(real):
        wn = abs(l.real)
        if wn == 0:
            modes.append(Mode(f"aperiodic-{i + 1}", complex(l), 0.0, float("nan"),
                              float("inf"), 0.0, None))
            continue
        zeta = -math.copysign(1.0, l.real)
        modes.append(Mode(f"aperiodic-{i + 1}", complex(l), wn, zeta, 1.0 / wn, 0.0, None))
    return ModeReport(modes)
