"""
Output sensitivities, Fisher information, Cramér-Rao bounds and input design.

The measured outputs are the four longitudinal states. Sensitivities are
taken with respect to the dimensionless derivatives (and optionally the
initial state, which the estimator treats as unknown).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .airframe import LON_NAMES, AeroDerivatives, AircraftConfig, DomainError
from .dynamics import N_PARAMS, STATE_LABELS, lon_rhs, rk4, rk4_step_sens, _as_params
from .maneuver import Envelope, generate_3211, n_samples

log = logging.getLogger(__name__)

# Sensor noise standard deviations for (V_T, alpha, theta, q): 1 m/s, 0.5 deg,
# 0.1 deg and 0.1 deg/s.
SIGMA_Y = np.array([1.0, math.radians(0.5), math.radians(0.1), math.radians(0.1)])

INITIAL_STATE_LABELS = tuple(f"{s}_0" for s in STATE_LABELS)


@dataclass
class SensitivityTrajectory:
    """dy(k)/dp for every sample, shape (N, n_y, n_p)."""

    S: np.ndarray
    labels: tuple
    x: np.ndarray | None = None

    def __post_init__(self):
        if self.S.ndim != 3 or self.S.shape[2] != len(self.labels):
            raise ValueError("sensitivity array does not match labels")

    def __len__(self):
        return self.S.shape[0]

    def concat(self, other: "SensitivityTrajectory") -> "SensitivityTrajectory":
        if self.labels != other.labels:
            raise ValueError("parameter labels differ")
        return SensitivityTrajectory(np.concatenate([self.S, other.S]), self.labels)


def propagate_sensitivities(x0, inputs, p, config: AircraftConfig, T_s: float,
                            substeps: int = 1):
    """Batched forward-ODE sensitivities.

    x0: (..., 4); inputs: (..., N). Returns states (..., N, 4) and
    sensitivities (..., N, 4, 16), columns = (initial state, parameters).
    """
    x = np.array(x0, dtype=float)
    u = np.asarray(inputs, dtype=float)
    n = u.shape[-1]
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (4,)).copy()
    S = np.zeros(batch + (4, 4 + N_PARAMS))
    S[..., :, :4] = np.eye(4)
    xs = np.empty(batch + (n, 4))
    Ss = np.empty(batch + (n, 4, 4 + N_PARAMS))
    p = _as_params(p)
    for k in range(n):
        xs[..., k, :] = x
        Ss[..., k, :, :] = S
        if k + 1 < n:
            x, S = rk4_step_sens(x, u[..., k], p, config, T_s, substeps, S=S)
    return xs, Ss


def _select_columns(S, free, include_initial_state):
    cols = [4 + i for i in free]
    labels = [LON_NAMES[i] for i in free]
    if include_initial_state:
        cols = [0, 1, 2, 3] + cols
        labels = list(INITIAL_STATE_LABELS) + labels
    return S[..., cols], tuple(labels)


def sensitivities(x0, inputs, p, config: AircraftConfig, T_s: float,
                  method: str = "forward_ode", free=None,
                  include_initial_state: bool = False, substeps: int = 1,
                  rel_step: float = 1e-6) -> SensitivityTrajectory:
    """Output sensitivities along one experiment.

    ``method`` is "forward_ode" (variational equations integrated with the
    same RK4 grid) or "finite_diff" (central differences, step rel_step·|p_i|).
    """
    p = _as_params(p)
    free = list(range(N_PARAMS)) if free is None else list(free)
    u = np.asarray(inputs, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    if method == "forward_ode":
        xs, Ss = propagate_sensitivities(x0, u, p, config, T_s, substeps)
        S, labels = _select_columns(Ss, free, include_initial_state)
        return SensitivityTrajectory(S, labels, xs)
    if method != "finite_diff":
        raise ValueError(f"unknown sensitivity method {method!r}")

    # Perturb all parameters (and initial states) at once along a batch axis.
    n_cols = len(free) + (4 if include_initial_state else 0)
    steps = []
    P = np.tile(p, (2 * n_cols, 1))
    X0 = np.tile(x0, (2 * n_cols, 1))
    col = 0
    if include_initial_state:
        for i in range(4):
            h = rel_step * max(abs(x0[i]), 1.0)
            X0[2 * col, i] += h
            X0[2 * col + 1, i] -= h
            steps.append(h)
            col += 1
    for i in free:
        h = rel_step * abs(p[i]) if p[i] != 0 else rel_step
        P[2 * col, i] += h
        P[2 * col + 1, i] -= h
        steps.append(h)
        col += 1

    n = len(u)
    x = X0.copy()
    xs = np.empty((2 * n_cols, n, 4))
    for k in range(n):
        xs[:, k] = x
        if k + 1 < n:
            x = rk4(lambda z: lon_rhs(z, u[k], P, config), x, T_s / substeps) \
                if substeps == 1 else _substep(x, u[k], P, config, T_s, substeps)
    S = (xs[0::2] - xs[1::2]) / (2 * np.asarray(steps)[:, None, None])
    labels = (INITIAL_STATE_LABELS if include_initial_state else ()) + \
        tuple(LON_NAMES[i] for i in free)
    return SensitivityTrajectory(np.moveaxis(S, 0, -1), labels)


def _substep(x, u, P, config, T_s, substeps):
    h = T_s / substeps
    for _ in range(substeps):
        x = rk4(lambda z: lon_rhs(z, u, P, config), x, h)
    return x


# ---------------------------------------------------------------------------


@dataclass
class FisherMatrix:
    F: np.ndarray
    labels: tuple
    sigma_y: np.ndarray

    def __add__(self, other: "FisherMatrix") -> "FisherMatrix":
        if self.labels != other.labels:
            raise ValueError("parameter labels differ")
        return FisherMatrix(self.F + other.F, self.labels, self.sigma_y)

    def permuted(self, order) -> "FisherMatrix":
        order = list(order)
        return FisherMatrix(self.F[np.ix_(order, order)],
                            tuple(self.labels[i] for i in order), self.sigma_y)

    def scaled(self, scale) -> "FisherMatrix":
        """Fisher matrix of the relative parameters p_i / scale_i."""
        D = np.diag(np.asarray(scale, dtype=float))
        return FisherMatrix(D @ self.F @ D, self.labels, self.sigma_y)

    def covariance(self):
        """Inverse of F, or None when F is numerically singular."""
        if is_singular(self.F):
            return None
        return np.linalg.inv(self.F)

    def marginal(self, names) -> np.ndarray:
        """Covariance block for ``names`` with all other parameters treated as
        nuisance (i.e. the corresponding block of F^-1)."""
        cov = self.covariance()
        if cov is None:
            raise np.linalg.LinAlgError("Fisher matrix is singular")
        idx = [self.labels.index(n) for n in names]
        return cov[np.ix_(idx, idx)]


def _sigma_vector(sigma_y):
    s = np.asarray(sigma_y, dtype=float)
    if s.ndim == 2:
        if np.count_nonzero(s - np.diag(np.diagonal(s))):
            raise DomainError("noise covariance must be diagonal")
        s = np.sqrt(np.diagonal(s))
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise DomainError("noise covariance must be positive definite")
    return s


def fisher(sens: SensitivityTrajectory | np.ndarray, sigma_y=SIGMA_Y, labels=None) -> FisherMatrix:
    """F = sum_k S_k^T Sigma_y^-1 S_k.

    ``sigma_y`` is the vector of per-channel standard deviations or the
    diagonal covariance matrix itself.
    """
    if isinstance(sens, SensitivityTrajectory):
        S, labels = sens.S, sens.labels
    else:
        S = np.asarray(sens, dtype=float)
        labels = tuple(labels) if labels is not None else tuple(
            f"p{i}" for i in range(S.shape[-1]))
    s = _sigma_vector(sigma_y)
    W = S / s[:, None]
    F = np.einsum("kyi,kyj->ij", W, W)
    return FisherMatrix(0.5 * (F + F.T), tuple(labels), s)


def is_singular(F, tol: float = 1e-13) -> bool:
    d = np.diagonal(F)
    if np.any(d <= 0):
        return True
    Dinv = 1.0 / np.sqrt(d)
    R = F * Dinv[:, None] * Dinv[None, :]
    return np.linalg.eigvalsh(R).min() < tol


@dataclass
class CrlbRow:
    name: str
    value: float
    crlb: float | None
    two_crlb: float | None
    two_crlb_pct: float | None
    sigma_cov: float | None
    two_sigma_cov_pct: float | None
    identifiable: bool


@dataclass
class CrlbReport:
    rows: list
    diagnostics: list = field(default_factory=list)

    def __getitem__(self, name) -> CrlbRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_rows(self):
        return [[r.name, r.value, r.two_crlb_pct, r.two_sigma_cov_pct] for r in self.rows]


def _pct(x, ref):
    if x is None or ref == 0:
        return None
    return 100.0 * x / abs(ref)


def crlb(fm: FisherMatrix, values, names=None) -> CrlbReport:
    """Per-parameter bounds: CRLB_i = 1/sqrt(F_ii) and, when F is invertible,
    sqrt((F^-1)_ii) which accounts for parameter correlation.

    ``names`` restricts the report to a subset of the labels (``values`` then
    follows that subset); the remaining columns act as nuisance parameters.
    """
    names = tuple(fm.labels) if names is None else tuple(names)
    values = np.asarray(values, dtype=float)
    if len(values) != len(names):
        raise ValueError("one value per reported parameter is required")
    F = fm.F
    diag = np.diagonal(F)
    cov = fm.covariance()
    diagnostics = []
    if cov is None:
        diagnostics.append("Fisher matrix is singular: covariance-based bounds omitted")
    rows = []
    for name, value in zip(names, values):
        i = fm.labels.index(name)
        ident = bool(diag[i] > 0)
        c = 1.0 / math.sqrt(diag[i]) if ident else None
        if not ident:
            diagnostics.append(f"{name}: zero information, parameter unidentifiable")
        s = math.sqrt(cov[i, i]) if cov is not None and cov[i, i] > 0 else None
        rows.append(CrlbRow(
            name=name, value=float(value),
            crlb=c, two_crlb=None if c is None else 2 * c,
            two_crlb_pct=_pct(None if c is None else 2 * c, value),
            sigma_cov=s, two_sigma_cov_pct=_pct(None if s is None else 2 * s, value),
            identifiable=ident,
        ))
    return CrlbReport(rows, diagnostics)


def joint_fisher(parts, n_local: int = 4) -> FisherMatrix:
    """Information of several experiments sharing their parameters.

    Each part carries ``n_local`` experiment-specific columns first (its
    initial state) followed by the shared parameters. The result is
    block-arrowhead: local blocks on the diagonal, shared block last.
    """
    parts = list(parts)
    shared = parts[0].labels[n_local:]
    for f in parts:
        if f.labels[n_local:] != shared:
            raise ValueError("shared parameter labels differ between experiments")
    m = len(shared)
    n = n_local * len(parts) + m
    F = np.zeros((n, n))
    labels = []
    for j, f in enumerate(parts):
        idx = list(range(n_local * j, n_local * (j + 1))) + list(range(n - m, n))
        F[np.ix_(idx, idx)] += f.F
        labels += [f"{lab}[{j}]" for lab in f.labels[:n_local]]
    return FisherMatrix(F, tuple(labels) + tuple(shared), parts[0].sigma_y)


# ---------------------------------------------------------------------------
# Optimal input design


def criterion_value(F: np.ndarray, kind: str = "A", reg: float = 1e-12) -> float:
    n = F.shape[0]
    Fr = F + reg * np.eye(n)
    if kind == "A":
        try:
            L = np.linalg.cholesky(Fr)
        except np.linalg.LinAlgError:
            return math.inf
        Linv = np.linalg.solve(L, np.eye(n))
        return float(np.sum(Linv * Linv))
    if kind == "D":
        sign, logdet = np.linalg.slogdet(Fr)
        return math.inf if sign <= 0 else float(-logdet)
    raise ValueError(f"unknown criterion {kind!r}")


@dataclass
class OedProblem:
    x0: np.ndarray
    delta_e_trim: float
    n_knots: int = 20
    amplitude: float = math.radians(3.0)
    horizon: float = 10.0
    T_s: float = 0.05
    criterion: str = "A"
    envelope: Envelope = field(default_factory=Envelope)
    sigma_y: np.ndarray = field(default_factory=lambda: SIGMA_Y.copy())
    free: tuple = tuple(range(N_PARAMS))
    initial_knots: np.ndarray | None = None
    max_iter: int = 30

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_knots < 1:
            raise ValueError("at least one knot is required")
        if self.amplitude < 0:
            raise ValueError("amplitude bound must be non-negative")

    @property
    def knot_interval(self) -> float:
        return self.horizon / self.n_knots

    def knot_index(self) -> np.ndarray:
        n = n_samples(self.horizon, self.T_s)
        idx = np.floor(np.arange(n) * self.T_s / self.knot_interval + 1e-9).astype(int)
        return np.minimum(idx, self.n_knots - 1)

    def inputs(self, knots) -> np.ndarray:
        """Absolute elevator samples for knot deviations (..., n_knots)."""
        knots = np.asarray(knots, dtype=float)
        return self.delta_e_trim + knots[..., self.knot_index()]

    def default_knots(self) -> np.ndarray:
        """A 3-2-1-1 whose base interval equals one knot interval."""
        pattern = [1, 1, 1, -1, -1, 1, -1]
        k = np.zeros(self.n_knots)
        k[:min(7, self.n_knots)] = pattern[:self.n_knots]
        return self.amplitude * k


@dataclass
class OedResult:
    knots: np.ndarray
    inputs: np.ndarray
    criterion: float
    initial_criterion: float
    evaluations: int
    feasible: bool
    max_violation: float
    fisher: FisherMatrix
    diagnostic: str = ""


def _evaluate_batch(problem: OedProblem, knots, p, config, scale):
    """Criterion, envelope violation and Fisher matrices for a batch of knots."""
    knots = np.atleast_2d(knots)
    u = problem.inputs(knots)
    xs, Ss = propagate_sensitivities(problem.x0, u, p, config, problem.T_s)
    cols = [4 + i for i in problem.free]
    S = Ss[..., cols] * scale
    W = S / problem.sigma_y[:, None]
    F = np.einsum("bkyi,bkyj->bij", W, W)
    lo, hi = problem.envelope.state_bounds()
    over = np.maximum(xs - hi, 0) + np.maximum(lo - xs, 0)
    over = np.where(np.isfinite(over), over, 1e6)
    viol = over.max(axis=(1, 2))
    width = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    penalty = np.sum((over / width) ** 2, axis=(1, 2))
    psi = np.array([criterion_value(f, problem.criterion) for f in F])
    bad = ~np.all(np.isfinite(xs), axis=(1, 2))
    psi[bad] = math.inf
    return psi, viol, penalty, F


def design_input(problem: OedProblem, p, config: AircraftConfig,
                 feas_tol: float = 1e-6) -> OedResult:
    """Locally optimal piecewise-constant elevator deviation.

    Knot values are bounded by ±amplitude; state bounds enter through an
    exterior penalty and are verified on the result. The returned design is
    the best feasible point seen, so it never scores worse than the initial
    guess.
    """
    p = _as_params(p)
    scale = np.maximum(np.abs(p[list(problem.free)]), 0.1)
    z0 = problem.default_knots() if problem.initial_knots is None \
        else np.asarray(problem.initial_knots, dtype=float)
    A = problem.amplitude
    if np.any(np.abs(z0) > A + 1e-12):
        raise ValueError("initial knots violate the amplitude bound")

    psi0, viol0, _, F0 = _evaluate_batch(problem, z0, p, config, scale)
    if viol0[0] > feas_tol:
        raise ValueError("initial guess violates the flight envelope")
    best = {"z": z0.copy(), "psi": psi0[0], "F": F0[0], "viol": viol0[0]}
    count = {"n": 1}
    if A == 0:
        return _finish(problem, best, psi0[0], count["n"], scale,
                       "zero amplitude bound: input fixed at trim")
    if not math.isfinite(psi0[0]):
        raise ValueError("initial guess gives no usable Fisher information")

    mu = 10.0
    h = 1e-6 * max(A, 1e-3)

    def merit_batch(Z):
        psi, viol, pen, F = _evaluate_batch(problem, Z, p, config, scale)
        count["n"] += len(Z)
        for z, ps, v, f in zip(Z, psi, viol, F):
            if v <= feas_tol and ps < best["psi"]:
                best.update(z=z.copy(), psi=ps, F=f, viol=v)
        # trace(F^-1) spans decades, so it is optimized on a log scale;
        # -log det is already logarithmic.
        if problem.criterion == "A":
            with np.errstate(divide="ignore", invalid="ignore"):
                psi = np.log(psi)
        val = psi + mu * pen
        return val

    def fun(z):
        n = len(z)
        Z = np.vstack([z, z + h * np.eye(n), z - h * np.eye(n)])
        Z = np.clip(Z, -A, A)
        vals = merit_batch(Z)
        dz = (Z[1:n + 1] - Z[n + 1:]).diagonal()
        grad = (vals[1:n + 1] - vals[n + 1:]) / np.where(dz > 0, dz, 1.0)
        f0 = vals[0]
        if not math.isfinite(f0):
            return 1e10, np.zeros(n)
        return f0, np.where(np.isfinite(grad), grad, 0.0)

    z = z0.copy()
    message = ""
    for _ in range(4):
        res = minimize(fun, z, jac=True, method="L-BFGS-B",
                       bounds=[(-A, A)] * len(z),
                       options={"maxiter": problem.max_iter, "ftol": 1e-10, "gtol": 1e-8})
        z = np.clip(res.x, -A, A)
        message = str(res.message)
        _, viol, _, _ = _evaluate_batch(problem, z, p, config, scale)
        if viol[0] <= feas_tol:
            break
        mu *= 10.0
    return _finish(problem, best, psi0[0], count["n"], scale, message)


def _finish(problem, best, psi0, evaluations, scale, diagnostic):
    labels = tuple(LON_NAMES[i] for i in problem.free)
    fm = FisherMatrix(best["F"], labels, problem.sigma_y)
    if is_singular(best["F"]):
        diagnostic = (diagnostic + "; " if diagnostic else "") + \
            "Fisher matrix singular: parameters unidentifiable"
    return OedResult(
        knots=best["z"], inputs=problem.inputs(best["z"]), criterion=float(best["psi"]),
        initial_criterion=float(psi0), evaluations=evaluations,
        feasible=bool(best["viol"] <= 1e-6), max_violation=float(best["viol"]),
        fisher=fm, diagnostic=diagnostic,
    )


def reference_3211(problem: OedProblem) -> np.ndarray:
    """Amplitude-matched 3-2-1-1 deviation on the design grid."""
    return generate_3211(problem.amplitude, problem.knot_interval, problem.T_s,
                         0.0, problem.horizon)
