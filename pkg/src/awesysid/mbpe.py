"""
Multi-experiment model-based parameter estimation by direct multiple shooting.

For each experiment with N samples the unknowns are the N-1 shooting nodes
s_0 ... s_{N-2} (one per input interval) and the shared aerodynamic
parameters. The measurement at the last sample is compared against the
integration of the last node, so every sample enters the fit::

    minimize   sum_i sum_k || y_k - x_k ||^2_{Sigma_y^-1}
    subject to s_{k+1} = Pi(s_k, u_k, p)          k = 0 .. N-3

where Pi is one RK4 step over the sample period and x_k = s_k for k < N-1,
x_{N-1} = Pi(s_{N-2}, u_{N-2}, p).

The problem is solved by a constrained Gauss-Newton method. Each iteration
linearizes residuals and continuity conditions, eliminates all nodes of an
experiment except the first by forward recursion (condensing), removes the
first node by a Schur complement and solves the remaining parameter-sized
system with Levenberg-Marquardt damping. Steps are globalized with an
Armijo line search on the l1 merit function objective + mu * ||defects||_1.
Internally nodes are scaled by the per-channel noise level and parameters
by max(|p_init|, 0.1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .airframe import LON_NAMES, AeroDerivatives, AircraftConfig
from .dynamics import N_PARAMS, STATE_LABELS, rk4_step_sens, simulate, _as_params

log = logging.getLogger(__name__)


class DegenerateProblemError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass
class Experiment:
    """One flight record: elevator input and measured longitudinal states."""

    id: str
    T_s: float
    inputs: np.ndarray
    outputs: np.ndarray
    sigma_y: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        self.sigma_y = np.asarray(self.sigma_y, dtype=float)
        if not self.T_s > 0:
            raise ValueError("sample period must be positive")
        if self.outputs.ndim != 2 or self.outputs.shape[1] != 4:
            raise ValueError("outputs must be an N x 4 array")
        if len(self.inputs) != len(self.outputs):
            raise ValueError("input and output series differ in length")
        if len(self.inputs) < 2:
            raise ValueError("an experiment needs at least two samples")
        if self.sigma_y.shape != (4,) or np.any(self.sigma_y <= 0):
            raise ValueError("sigma_y must hold four positive values")

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.T_s


@dataclass(frozen=True)
class ParameterMask:
    """Parameters held at fixed values during estimation (name -> value)."""

    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.fixed) - set(LON_NAMES)
        if unknown:
            raise ValueError(f"unknown parameters in mask: {sorted(unknown)}")

    @classmethod
    def fix(cls, names, derivs) -> "ParameterMask":
        values = _as_params(derivs)
        return cls({n: float(values[LON_NAMES.index(n)]) for n in names})

    @property
    def free(self) -> list:
        return [i for i, n in enumerate(LON_NAMES) if n not in self.fixed]

    def apply(self, values) -> np.ndarray:
        out = np.array(_as_params(values), dtype=float)
        for name, v in self.fixed.items():
            out[LON_NAMES.index(name)] = v
        return out


# Parameters the flight-test analysis holds at their a-priori values.
DEFAULT_FIXED = ("CXq", "CXde", "CZq")


@dataclass
class Problem:
    experiments: list
    p_init: np.ndarray
    mask: ParameterMask
    config: AircraftConfig
    nodes_init: list
    substeps: int = 1

    @property
    def free(self) -> list:
        return self.mask.free

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.abs(self.p_init[self.free]), 0.1)

    @property
    def n_X(self) -> int:
        return sum(4 * (e.n_samples - 1) for e in self.experiments)

    @property
    def n_p(self) -> int:
        return len(self.free)

    @property
    def n_opt(self) -> int:
        return self.n_p + self.n_X


def assemble(experiments, p_init, mask: ParameterMask | None = None,
             config: AircraftConfig | None = None, substeps: int = 1,
             nodes_init=None) -> Problem:
    """Build the lifted estimation problem.

    Nodes are initialized with the measured outputs unless ``nodes_init``
    supplies state estimates.
    """
    experiments = list(experiments)
    if not experiments:
        raise DegenerateProblemError("no experiments given")
    mask = mask or ParameterMask()
    if not mask.free:
        raise DegenerateProblemError("every parameter is fixed")
    config = config or AircraftConfig()
    p0 = mask.apply(p_init)
    if nodes_init is None:
        nodes_init = [e.outputs[:-1].copy() for e in experiments]
    else:
        nodes_init = [np.array(n, dtype=float) for n in nodes_init]
        for n, e in zip(nodes_init, experiments):
            if n.shape != (e.n_samples - 1, 4):
                raise ValueError("node initialization has the wrong shape")
    return Problem(experiments, p0, mask, config, nodes_init, substeps)


# ---------------------------------------------------------------------------


@dataclass
class _ExpLin:
    """Linearization of one experiment in scaled coordinates."""

    r: np.ndarray      # (N, 4) residuals (y - x)/sigma
    d: np.ndarray      # (N-2, 4) defects (s_{k+1} - Pi(s_k))/sigma
    G: np.ndarray      # (N-1, 4, 4) dPi/ds, scaled
    P: np.ndarray      # (N-1, 4, n_free) dPi/dz, scaled


def _linearize(problem: Problem, nodes, p):
    cfg = problem.config
    free, scale = problem.free, problem.scale
    out = []
    for e, s in zip(problem.experiments, nodes):
        sig = e.sigma_y
        M = len(s)
        xe, Se = rk4_step_sens(s, e.inputs[:M], p, cfg, e.T_s, problem.substeps)
        r = np.empty((M + 1, 4))
        r[:M] = (e.outputs[:M] - s) / sig
        r[M] = (e.outputs[M] - xe[M - 1]) / sig
        d = (s[1:] - xe[:-1]) / sig
        G = Se[:, :, :4] * (sig[None, None, :] / sig[None, :, None])
        P = Se[:, :, [4 + i for i in free]] * (scale[None, None, :] / sig[None, :, None])
        out.append(_ExpLin(r, d, G, P))
    return out


def _condense(lin: _ExpLin):
    """Forward recursion T_{k+1} = G_k T_k + [-d_k | 0 | P_k].

    Returns T of shape (N, 4, 1 + 4 + n_free) so that the node increments are
    a_k + B_k ds_0 + C_k dz with T_k = [a_k | B_k | C_k].
    """
    M = lin.G.shape[0]
    nz = lin.P.shape[2]
    T = np.zeros((M + 1, 4, 5 + nz))
    T[0, :, 1:5] = np.eye(4)
    G, P, d = lin.G, lin.P, lin.d
    for k in range(M):
        nxt = G[k] @ T[k]
        nxt[:, 5:] += P[k]
        if k < M - 1:
            nxt[:, 0] -= d[k]
        T[k + 1] = nxt
    return T


@dataclass
class _Step:
    dz: np.ndarray
    ds0: list
    T: list
    model_obj: float          # 1/2 sum ||r_lin||^2 at the full step
    dir_deriv_obj: float      # directional derivative of 1/2 sum ||r||^2
    jd_sq: float              # sum ||J delta||^2
    H_red: np.ndarray
    grad_inf: float


def _reduced_system(lins):
    n_free = lins[0].P.shape[2]
    H_red = np.zeros((n_free, n_free))
    g_red = np.zeros(n_free)
    blocks = []
    grad_inf = 0.0
    g_z_total = np.zeros(n_free)
    for lin in lins:
        T = _condense(lin)
        e = lin.r - T[:, :, 0]          # residual after gap closing
        E = T[:, :, 1:]                 # (N, 4, 4 + nz)
        H = np.einsum("kyi,kyj->ij", E, E)
        g = np.einsum("kyi,ky->i", E, e)
        Hss, Hsz, Hzz = H[:4, :4], H[:4, 4:], H[4:, 4:]
        gs, gz = g[:4], g[4:]
        L = np.linalg.cholesky(Hss)
        X = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Hsz, gs])))
        H_red += Hzz - Hsz.T @ X[:, :-1]
        g_red += gz - Hsz.T @ X[:, -1]
        g_z_total += gz
        grad_inf = max(grad_inf, float(np.abs(gs).max()))
        blocks.append((T, e, E, X))
    grad_inf = max(grad_inf, float(np.abs(g_z_total).max()))
    return H_red, g_red, blocks, grad_inf


def _condensed_step(lins, lam: float, cap: float = 1e12) -> tuple:
    H_red, g_red, blocks, grad_inf = _reduced_system(lins)
    n = len(g_red)
    ref = max(float(np.mean(np.diagonal(H_red))), 1e-300)
    while True:
        try:
            L = np.linalg.cholesky(H_red + lam * ref * np.eye(n))
            break
        except np.linalg.LinAlgError:
            lam = max(10 * lam, 1e-12)
            if lam > cap:
                raise SolverError("reduced Hessian singular beyond the damping cap") from None
    dz = np.linalg.solve(L.T, np.linalg.solve(L, g_red))

    ds0, Ts = [], []
    model_obj = dir_obj = jd_sq = 0.0
    for lin, (T, e, E, X) in zip(lins, blocks):
        s0 = X[:, -1] - X[:, :-1] @ dz
        delta = np.concatenate([s0, dz])
        r_lin = e - E @ delta
        model_obj += 0.5 * float(np.sum(r_lin ** 2))
        diff = r_lin - lin.r
        dir_obj += float(np.sum(lin.r * diff))
        jd_sq += float(np.sum(diff ** 2))
        ds0.append(s0)
        Ts.append(T)
    return _Step(dz, ds0, Ts, model_obj, dir_obj, jd_sq, H_red, grad_inf), lam


def dense_kkt_step(problem: Problem, nodes=None, p=None) -> tuple:
    """Undamped Gauss-Newton step from the explicitly assembled KKT system.

    Only meant for small instances (cross-validation of the condensed
    solver). Returns (node increments per experiment, parameter increments),
    both in physical units.
    """
    nodes = problem.nodes_init if nodes is None else nodes
    p = problem.p_init if p is None else _as_params(p)
    lins = _linearize(problem, nodes, p)
    nz = len(problem.free)
    sizes = [4 * lin.G.shape[0] for lin in lins]
    n_w = sum(sizes) + nz
    rows_r, rows_c = [], []
    rhs_r, rhs_c = [], []
    off = 0
    for lin, size in zip(lins, sizes):
        M = lin.G.shape[0]
        for k in range(M + 1):
            row = np.zeros((4, n_w))
            if k < M:
                row[:, off + 4 * k: off + 4 * k + 4] = -np.eye(4)
            else:
                row[:, off + 4 * (M - 1): off + 4 * M] = -lin.G[M - 1]
                row[:, -nz:] = -lin.P[M - 1]
            rows_r.append(row)
            rhs_r.append(lin.r[k])
        for k in range(M - 1):
            row = np.zeros((4, n_w))
            row[:, off + 4 * (k + 1): off + 4 * (k + 2)] = np.eye(4)
            row[:, off + 4 * k: off + 4 * k + 4] = -lin.G[k]
            row[:, -nz:] = -lin.P[k]
            rows_c.append(row)
            rhs_c.append(lin.d[k])
        off += size
    J = np.vstack(rows_r)
    r = np.concatenate(rhs_r)
    A = np.vstack(rows_c)
    c = np.concatenate(rhs_c)
    n_c = A.shape[0]
    K = np.block([[J.T @ J, A.T], [A, np.zeros((n_c, n_c))]])
    sol = np.linalg.solve(K, np.concatenate([-J.T @ r, -c]))
    w = sol[:n_w]
    out, off = [], 0
    for e, size in zip(problem.experiments, sizes):
        out.append(w[off: off + size].reshape(-1, 4) * e.sigma_y)
        off += size
    return out, w[-nz:] * problem.scale


def condensed_step(problem: Problem, nodes=None, p=None) -> tuple:
    """Undamped condensed step in physical units (counterpart of
    :func:`dense_kkt_step`)."""
    nodes = problem.nodes_init if nodes is None else nodes
    p = problem.p_init if p is None else _as_params(p)
    lins = _linearize(problem, nodes, p)
    step, _ = _condensed_step(lins, 0.0)
    out = []
    for e, T, s0 in zip(problem.experiments, step.T, step.ds0):
        delta = np.concatenate([[1.0], s0, step.dz])
        out.append((T[:-1] @ delta) * e.sigma_y)
    return out, step.dz * problem.scale


# ---------------------------------------------------------------------------


@dataclass
class EstimationResult:
    p: AeroDerivatives
    cov: np.ndarray
    free_names: tuple
    residual_norms: list
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool
    nodes: list
    history: list = field(default_factory=list)
    message: str = ""

    @property
    def std(self) -> dict:
        return dict(zip(self.free_names, np.sqrt(np.diagonal(self.cov))))

    def full_cov(self) -> np.ndarray:
        """12 x 12 covariance with zero rows/columns for fixed parameters."""
        out = np.zeros((N_PARAMS, N_PARAMS))
        idx = [LON_NAMES.index(n) for n in self.free_names]
        out[np.ix_(idx, idx)] = self.cov
        return out


@dataclass
class SolveOptions:
    max_iter: int = 100
    tol: float = 1e-8
    lm_init: float = 0.0
    lm_cap: float = 1e12
    armijo: float = 1e-4
    min_step: float = 1e-10


def _node_increments(step: _Step):
    """Scaled node increments per experiment and the largest scaled change."""
    dnodes = [T[:-1] @ np.concatenate([[1.0], s0, step.dz])
              for T, s0 in zip(step.T, step.ds0)]
    size = max(float(np.abs(step.dz).max()), max(float(np.abs(d).max()) for d in dnodes))
    return dnodes, size


def _merit_parts(lins):
    obj = 0.5 * sum(float(np.sum(l.r ** 2)) for l in lins)
    infeas = sum(float(np.abs(l.d).sum()) for l in lins)
    dmax = max((float(np.abs(l.d).max()) if l.d.size else 0.0) for l in lins)
    return obj, infeas, dmax


def solve(problem: Problem, options: SolveOptions | None = None) -> EstimationResult:
    opts = options or SolveOptions()
    free, scale = problem.free, problem.scale
    p = problem.p_init.copy()
    nodes = [n.copy() for n in problem.nodes_init]
    lam = opts.lm_init
    mu = 1.0
    history = []

    lins = _linearize(problem, nodes, p)
    obj, infeas, dmax = _merit_parts(lins)
    converged = False
    message = "iteration budget exhausted"
    kkt = math.inf
    step = None
    it = 0
    for it in range(1, opts.max_iter + 1):
        step, lam = _condensed_step(lins, lam, opts.lm_cap)
        dnodes, step_inf = _node_increments(step)
        if lam > 0 and step_inf < opts.tol:
            # A damped step understates stationarity; judge by the plain one.
            _, step_inf = _node_increments(_condensed_step(lins, 0.0, opts.lm_cap)[0])
        kkt = max(dmax, step_inf)
        history.append({"iter": it, "objective": 2 * obj, "merit": obj + mu * infeas,
                        "defect_inf": dmax, "step_inf": step_inf, "grad_inf": step.grad_inf,
                        "kkt": kkt, "lm": lam})
        history[-1]["t"] = None
        log.debug("iter %d obj %.6e defect %.3e step %.3e", it, 2 * obj, dmax, step_inf)
        if kkt < opts.tol:
            converged = True
            message = "converged"
            break

        if infeas > 0:
            need = (step.dir_deriv_obj + 0.5 * step.jd_sq) / (0.5 * infeas)
            if need >= mu:
                mu = 1.1 * need + 1e-8
        merit0 = obj + mu * infeas
        slope = step.dir_deriv_obj - mu * infeas

        t = 1.0
        accepted = False
        while t >= opts.min_step:
            p_try = p.copy()
            p_try[free] += t * step.dz * scale
            nodes_try = [n + t * dn * e.sigma_y
                         for n, dn, e in zip(nodes, dnodes, problem.experiments)]
            with np.errstate(all="ignore"):
                lins_try = _linearize(problem, nodes_try, p_try)
                obj_t, inf_t, dmax_t = _merit_parts(lins_try)
            merit_t = obj_t + mu * inf_t
            # Below working precision the Armijo test only compares rounding
            # noise; a full step is then taken as long as it does not blow up.
            tiny = -slope <= 1e-12 * max(1.0, abs(merit0))
            if tiny and t == 1.0 and merit_t <= merit0 * (1 + 1e-10) + 1e-300:
                accepted = True
                break
            if math.isfinite(merit_t) and merit_t <= merit0 + opts.armijo * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if kkt < 1e2 * opts.tol:
                converged = True
                message = "converged (no further decrease at working precision)"
            else:
                message = "line search failed"
            break
        history[-1]["t"] = t
        p, nodes, lins = p_try, nodes_try, lins_try
        obj, infeas, dmax = obj_t, inf_t, dmax_t
        if t == 1.0:
            lam /= 3.0
        elif t < 0.3:
            lam = max(4.0 * lam, 1e-8)
        if lam > opts.lm_cap:
            message = "damping exceeded its cap"
            break

    # Covariance from the undamped reduced Hessian at the final iterate.
    H_red, _, _, _ = _reduced_system(lins)
    try:
        cov_z = np.linalg.inv(H_red)
    except np.linalg.LinAlgError:
        cov_z = np.full_like(H_red, np.nan)
    cov = cov_z * np.outer(scale, scale)
    cov = 0.5 * (cov + cov.T)

    norms = [float(np.sqrt(np.sum(l.r ** 2))) for l in lins]
    return EstimationResult(
        p=AeroDerivatives.from_lon_array(p), cov=cov,
        free_names=tuple(LON_NAMES[i] for i in free), residual_norms=norms,
        objective=2 * obj, iterations=it, kkt_residual=kkt, converged=converged,
        nodes=nodes, history=history, message=message,
    )


# ---------------------------------------------------------------------------


@dataclass
class ResidualTrace:
    id: str
    t: np.ndarray
    predicted: np.ndarray
    residual: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.residual.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.residual.std(axis=0, ddof=1)


def residual_traces(result: EstimationResult | AeroDerivatives, experiments,
                    config: AircraftConfig | None = None, initial_states=None) -> list:
    """Free-run simulation of every experiment at the estimated parameters.

    Each run starts from the experiment's first shooting node (or from the
    given initial states, or the first measurement when neither exists).
    """
    config = config or AircraftConfig()
    if isinstance(result, EstimationResult):
        p = result.p
        starts = [n[0] for n in result.nodes]
    else:
        p = result
        starts = [e.outputs[0] for e in experiments]
    if initial_states is not None:
        starts = list(initial_states)
    traces = []
    for e, x0 in zip(experiments, starts):
        traj = simulate(x0, e.inputs, e.T_s, p, config)
        pred = traj.x
        if traj.aborted:
            pad = np.full((e.n_samples - len(pred), 4), np.nan)
            pred = np.vstack([pred, pad])
        traces.append(ResidualTrace(e.id, e.t, pred, e.outputs - pred))
    return traces
