"""Synthetic flight campaigns: data generation with a sensor model, signal
conditioning, experiment file I/O and the estimation/validation pipeline."""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, filtfilt, lfilter

from .airframe import LON_NAMES, SYNTHETIC_TRUTH, AeroDerivatives, AircraftConfig, dimensionalize
from .airframe import DIMENSIONAL_NAMES, _conversion_gains
from .dynamics import STATE_LABELS, simulate, trim
from .maneuver import Envelope, ManeuverKind, ManeuverSpec, n_samples
from .mbpe import DEFAULT_FIXED, Experiment, ParameterMask, SolveOptions, assemble, residual_traces, solve
from .oed import OedProblem, crlb, design_input, fisher, joint_fisher, sensitivities
from .validation import compare_modes, residual_stats, tic

OUTPUT_ENV = "AWESYSID_OUT"
CSV_HEADER = ("t", "delta_e", "V_T", "alpha", "theta", "q")


class CampaignError(RuntimeError):
    """Failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class SensorModel:
    """Per-channel noise standard deviations (SI units, angles in rad).

    ``noise_gain`` multiplies the noise actually injected; the weights used
    for estimation always come from the nominal standard deviations. Only the
    four longitudinal channels enter the pipeline, the others are kept for
    completeness of the sensor table.
    """

    V_T: float = 1.0
    alpha: float = math.radians(0.5)
    beta: float = math.radians(0.5)
    attitude: float = math.radians(0.1)
    rate: float = math.radians(0.1)
    quantization: float = math.radians(0.25)
    delay: int = 1
    noise_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("V_T", "alpha", "beta", "attitude", "rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"sensor sigma for {name} must be positive")
        if self.quantization < 0:
            raise ValueError("quantization step must be non-negative")
        if self.delay < 0 or int(self.delay) != self.delay:
            raise ValueError("transport delay must be a non-negative whole number of frames")
        if self.noise_gain < 0:
            raise ValueError("noise gain must be non-negative")

    @property
    def sigma_y(self) -> np.ndarray:
        return np.array([self.V_T, self.alpha, self.attitude, self.rate])


@dataclass(frozen=True)
class OedSettings:
    n_knots: int = 20
    amplitude: float = math.radians(3.0)
    horizon: float = 10.0
    criterion: str = "A"
    design_T_s: float = 0.05
    max_iter: int = 15


@dataclass(frozen=True)
class ExperimentSpec:
    """One planned experiment: a maneuver flown from trim at ``V_Te``.

    With ``optimize`` set, the elevator input is designed on the a-priori
    model and ``maneuver`` is ignored.
    """

    id: str
    maneuver: ManeuverSpec | None = None
    V_Te: float = 20.0
    T_s: float = 0.01
    role: str = "estimation"
    optimize: OedSettings | None = None
    actuator_tau: float = 0.0

    def __post_init__(self):
        if self.actuator_tau < 0:
            raise ValueError(f"experiment {self.id}: actuator time constant must be non-negative")
        if self.role not in ("estimation", "validation"):
            raise ValueError(f"experiment {self.id}: unknown role {self.role!r}")
        if self.maneuver is None and self.optimize is None:
            raise ValueError(f"experiment {self.id}: needs a maneuver or OED settings")
        if not self.T_s > 0:
            raise ValueError(f"experiment {self.id}: sample period must be positive")

    @property
    def duration(self) -> float:
        return self.optimize.horizon if self.optimize else self.maneuver.total_duration


@dataclass(frozen=True)
class CampaignSpec:
    experiments: tuple
    config: AircraftConfig = field(default_factory=AircraftConfig)
    p_true: AeroDerivatives = SYNTHETIC_TRUTH
    p_init: AeroDerivatives = field(default_factory=AeroDerivatives)
    sensor: SensorModel = field(default_factory=SensorModel)
    filter_cutoff: float | None = 5.0
    fixed: tuple = DEFAULT_FIXED
    envelope: Envelope = field(default_factory=Envelope)
    max_iter: int = 100

    def __post_init__(self):
        object.__setattr__(self, "experiments", tuple(self.experiments))
        if not self.experiments:
            raise ValueError("campaign has no experiments")
        if not any(e.role == "estimation" for e in self.experiments):
            raise ValueError("campaign has no estimation experiment")
        ids = [e.id for e in self.experiments]
        if len(set(ids)) != len(ids):
            raise ValueError("experiment ids must be unique")
        ParameterMask({n: 0.0 for n in self.fixed})

    @property
    def estimation(self) -> list:
        return [e for e in self.experiments if e.role == "estimation"]

    @property
    def validation(self) -> list:
        return [e for e in self.experiments if e.role == "validation"]


def reference_campaign_spec(**overrides) -> CampaignSpec:
    """Six estimation experiments sized to 8891 shooting nodes in total
    (three 3-2-1-1 of about 20 s, three optimized inputs of 10 s at 100 Hz)
    plus one held-out 3-2-1-1 for validation.

    The elevator servo is modelled as a 0.1 s first-order lag. With ideal
    steps the 5 Hz output filter rounds off the kinks in pitch rate and
    biases the estimates by several standard deviations.
    """
    deg = math.radians
    tau = 0.1
    exps = (
        ExperimentSpec("E1", ManeuverSpec("3211", deg(2.0), 0.6, 1.0, 19.64), actuator_tau=tau),
        ExperimentSpec("E2", ManeuverSpec("3211", deg(2.5), 0.5, 1.0, 19.64), actuator_tau=tau),
        ExperimentSpec("E3", ManeuverSpec("3211", deg(3.0), 0.7, 1.0, 19.63), actuator_tau=tau),
        ExperimentSpec("O1", optimize=OedSettings(20, deg(3.0), 10.0, "A"), actuator_tau=tau),
        ExperimentSpec("O2", optimize=OedSettings(20, deg(2.0), 10.0, "D"), actuator_tau=tau),
        ExperimentSpec("O3", optimize=OedSettings(25, deg(2.5), 10.0, "A"), actuator_tau=tau),
        ExperimentSpec("V1", ManeuverSpec("3211", deg(2.0), 0.8, 1.0, 20.0), role="validation",
                       actuator_tau=tau),
    )
    return replace(CampaignSpec(exps), **overrides)


# ---------------------------------------------------------------------------
# Generation and conditioning


def _quantize(u, step):
    if step == 0:
        return np.array(u, dtype=float)
    return step * np.round(np.asarray(u) / step)


def actuator_response(command, trim_value: float, tau: float, T_s: float) -> np.ndarray:
    """First-order servo lag, exactly discretized for a sample-and-hold command."""
    command = np.asarray(command, dtype=float)
    if tau == 0:
        return command.copy()
    a = math.exp(-T_s / tau)
    dev, _ = lfilter([1 - a], [1, -a], command - trim_value, zi=[0.0])
    # The lag acts within each interval; report the deflection held over it.
    return trim_value + dev


def design_experiment_input(spec: ExperimentSpec, p_init, config: AircraftConfig,
                            envelope: Envelope | None = None) -> np.ndarray:
    """Knot values (deviation from trim) of an optimized input."""
    o = spec.optimize
    tp = trim(spec.V_Te, p_init, config)
    prob = OedProblem(x0=tp.state, delta_e_trim=tp.delta_e_trim, n_knots=o.n_knots,
                      amplitude=o.amplitude, horizon=o.horizon, T_s=o.design_T_s,
                      criterion=o.criterion, envelope=envelope or Envelope(),
                      max_iter=o.max_iter)
    return design_input(prob, p_init, config).knots


def resolve_maneuver(spec: ExperimentSpec, knots=None) -> ManeuverSpec:
    if spec.optimize is None:
        return spec.maneuver
    if knots is None:
        raise ValueError(f"experiment {spec.id}: optimized input has not been designed")
    o = spec.optimize
    return ManeuverSpec(ManeuverKind.PIECEWISE_CONSTANT, o.amplitude, o.horizon / o.n_knots,
                        0.0, o.horizon, tuple(knots))


def generate_experiment(spec: ExperimentSpec, p_true, seed=None, sensor: SensorModel | None = None,
                        config: AircraftConfig | None = None, envelope: Envelope | None = None,
                        knots=None) -> Experiment:
    """Simulate one experiment and record it through the sensor model.

    The aircraft is trimmed at the experiment airspeed with the true parameters.
    The commanded elevator passes through the actuator lag; the surface
    position sensor records the resulting deflection.
    Measured outputs lag the true states by ``sensor.delay`` frames, so the
    raw record holds ``delay`` more samples than the conditioned one. The
    recorded elevator is quantized. If the response leaves the envelope the
    record is truncated and flagged.
    """
    sensor = sensor or SensorModel()
    config = config or AircraftConfig()
    seed = sensor.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    man = resolve_maneuver(spec, knots)
    tp = trim(spec.V_Te, p_true, config)
    u_true = actuator_response(man.generate(spec.T_s, tp.delta_e_trim, envelope),
                               tp.delta_e_trim, spec.actuator_tau, spec.T_s)
    d = int(sensor.delay)
    u_true = np.concatenate([u_true, np.full(d, tp.delta_e_trim)])
    traj = simulate(tp.state, u_true, spec.T_s, p_true, config, envelope=envelope)
    x = traj.x
    n = len(x)
    delayed = np.vstack([np.repeat(x[:1], d, axis=0), x])[:n]
    noise = rng.standard_normal((n, 4)) * sensor.sigma_y * sensor.noise_gain
    meta = {
        "T_s": spec.T_s, "sigma_y": sensor.sigma_y.tolist(), "V_Te": spec.V_Te,
        "trim": {"alpha": tp.alpha_e, "theta": tp.theta_e, "delta_e": tp.delta_e_trim},
        "maneuver": _maneuver_dict(man), "delay": d, "quantization": sensor.quantization,
        "role": spec.role, "conditioned": False, "aborted": bool(traj.aborted),
    }
    if traj.aborted:
        meta["abort_reason"] = traj.abort_reason
    return Experiment(spec.id, spec.T_s, _quantize(u_true[:n], sensor.quantization),
                      delayed + noise, sensor.sigma_y, meta)


def condition(raw: Experiment, cutoff: float | None = 5.0, delay: int | None = None,
              order: int = 2) -> Experiment:
    """Zero-phase low-pass filter the outputs and undo the transport delay.

    The delay is removed by pairing input sample k with output sample
    k + delay; the quantized elevator record is passed through unchanged.
    """
    if raw.metadata.get("conditioned"):
        raise ValueError(f"experiment {raw.id} is already conditioned")
    d = int(raw.metadata.get("delay", 0) if delay is None else delay)
    if d < 0 or d >= raw.n_samples - 1:
        raise ValueError("delay does not fit the record")
    nyq = 0.5 / raw.T_s
    y = raw.outputs[d:]
    u = raw.inputs[:raw.n_samples - d]
    if cutoff is not None:
        if not 0 < cutoff < nyq:
            raise ValueError(f"cutoff {cutoff} Hz must lie in (0, {nyq}) Hz")
        b, a = butter(order, cutoff / nyq)
        y = filtfilt(b, a, y, axis=0)
    meta = dict(raw.metadata, conditioned=True, delay_removed=d, cutoff_hz=cutoff)
    return Experiment(raw.id, raw.T_s, u.copy(), np.array(y), raw.sigma_y.copy(), meta)


# ---------------------------------------------------------------------------
# File I/O


def _maneuver_dict(m: ManeuverSpec) -> dict:
    out = asdict(m)
    out["kind"] = m.kind.value
    out["knots"] = list(m.knots)
    return out


def write_experiment(exp: Experiment, path) -> Path:
    """CSV with header t,delta_e,V_T,alpha,theta,q plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for k in range(exp.n_samples):
            row = [k * exp.T_s, exp.inputs[k], *exp.outputs[k]]
            w.writerow([repr(float(v)) for v in row])
    side = {"id": exp.id, "T_s": exp.T_s, "sigma_y": exp.sigma_y.tolist(),
            "metadata": exp.metadata}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def read_experiment(path) -> Experiment:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    side_path = path.with_suffix(".json")
    if side_path.exists():
        side = json.loads(side_path.read_text())
    else:
        t = data[:, 0]
        side = {"id": path.stem, "T_s": float(t[1] - t[0]),
                "sigma_y": SensorModel().sigma_y.tolist(), "metadata": {}}
    return Experiment(side["id"], side["T_s"], data[:, 1], data[:, 2:],
                      np.array(side["sigma_y"]), side.get("metadata", {}))


# Configuration files are INI documents. Angles carry a _deg suffix.

def _aircraft_from(section) -> AircraftConfig:
    kw = {f.name: section.getfloat(f.name) for f in fields(AircraftConfig) if f.name in section}
    return AircraftConfig(**kw)


def _derivs_from(section, base: AeroDerivatives) -> AeroDerivatives:
    return replace(base, **{n: section.getfloat(n) for n in LON_NAMES if n in section})


def _experiment_from(name: str, s) -> ExperimentSpec:
    kind = s.get("kind", "3211")
    common = dict(V_Te=s.getfloat("V_Te", 20.0), T_s=s.getfloat("T_s", 0.01),
                  role=s.get("role", "estimation"),
                  actuator_tau=s.getfloat("actuator_tau", 0.0))
    if kind == "optimized":
        o = OedSettings(s.getint("n_knots", 20), math.radians(s.getfloat("amplitude_deg", 3.0)),
                        s.getfloat("horizon", 10.0), s.get("criterion", "A"),
                        s.getfloat("design_T_s", 0.05), s.getint("max_iter", 15))
        return ExperimentSpec(name, optimize=o, **common)
    knots = tuple(math.radians(float(v)) for v in s.get("knots_deg", "").split(",") if v.strip())
    man = ManeuverSpec(kind, math.radians(s.getfloat("amplitude_deg", 2.0)),
                       s.getfloat("base_interval", 0.6), s.getfloat("lead_in", 1.0),
                       s.getfloat("total_duration", 20.0), knots)
    return ExperimentSpec(name, man, **common)


def load_config(path) -> CampaignSpec:
    """Read a campaign INI file; missing sections fall back to defaults.

    Without any ``[experiment.*]`` section the reference experiment plan
    is used.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise ValueError(f"cannot read configuration {path}")
    return spec_from_parser(cp)


def spec_from_parser(cp: configparser.ConfigParser) -> CampaignSpec:
    base = reference_campaign_spec()
    cfg = _aircraft_from(cp["aircraft"]) if cp.has_section("aircraft") else base.config
    p_true = _derivs_from(cp["derivatives.true"], base.p_true) \
        if cp.has_section("derivatives.true") else base.p_true
    p_init = _derivs_from(cp["derivatives.init"], base.p_init) \
        if cp.has_section("derivatives.init") else base.p_init
    sensor = base.sensor
    if cp.has_section("sensor"):
        s = cp["sensor"]
        sensor = SensorModel(
            V_T=s.getfloat("sigma_V_T", 1.0), alpha=math.radians(s.getfloat("sigma_alpha_deg", 0.5)),
            beta=math.radians(s.getfloat("sigma_beta_deg", 0.5)),
            attitude=math.radians(s.getfloat("sigma_attitude_deg", 0.1)),
            rate=math.radians(s.getfloat("sigma_rate_deg", 0.1)),
            quantization=math.radians(s.getfloat("quantization_deg", 0.25)),
            delay=s.getint("delay", 1), noise_gain=s.getfloat("noise_gain", 1.0),
            seed=s.getint("seed", 0))
    camp = cp["campaign"] if cp.has_section("campaign") else {}
    cutoff = camp.get("filter_cutoff_hz", "5.0") if camp else "5.0"
    cutoff = None if cutoff.strip().lower() in ("", "none", "off") else float(cutoff)
    fixed = tuple(v.strip() for v in camp.get("fixed", ",".join(DEFAULT_FIXED)).split(",")
                  if v.strip()) if camp else DEFAULT_FIXED
    max_iter = int(camp.get("max_iter", 100)) if camp else 100
    exps = tuple(_experiment_from(sec.split(".", 1)[1], cp[sec])
                 for sec in cp.sections() if sec.startswith("experiment."))
    return CampaignSpec(exps or base.experiments, cfg, p_true, p_init, sensor, cutoff,
                        fixed, base.envelope, max_iter)


def dump_config(spec: CampaignSpec) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["aircraft"] = {f.name: repr(float(getattr(spec.config, f.name))) for f in fields(AircraftConfig)}
    cp["derivatives.true"] = {n: repr(float(v)) for n, v in zip(LON_NAMES, spec.p_true.lon_array())}
    cp["derivatives.init"] = {n: repr(float(v)) for n, v in zip(LON_NAMES, spec.p_init.lon_array())}
    s = spec.sensor
    cp["sensor"] = {
        "sigma_V_T": repr(s.V_T), "sigma_alpha_deg": repr(math.degrees(s.alpha)),
        "sigma_beta_deg": repr(math.degrees(s.beta)),
        "sigma_attitude_deg": repr(math.degrees(s.attitude)),
        "sigma_rate_deg": repr(math.degrees(s.rate)),
        "quantization_deg": repr(math.degrees(s.quantization)), "delay": str(s.delay),
        "noise_gain": repr(s.noise_gain), "seed": str(s.seed)}
    cp["campaign"] = {"filter_cutoff_hz": "none" if spec.filter_cutoff is None
                      else repr(spec.filter_cutoff),
                      "fixed": ",".join(spec.fixed), "max_iter": str(spec.max_iter)}
    for e in spec.experiments:
        sec = {"V_Te": repr(e.V_Te), "T_s": repr(e.T_s), "role": e.role,
               "actuator_tau": repr(e.actuator_tau)}
        if e.optimize:
            o = e.optimize
            sec.update(kind="optimized", n_knots=str(o.n_knots),
                       amplitude_deg=repr(math.degrees(o.amplitude)), horizon=repr(o.horizon),
                       criterion=o.criterion, design_T_s=repr(o.design_T_s),
                       max_iter=str(o.max_iter))
        else:
            m = e.maneuver
            sec.update(kind=m.kind.value, amplitude_deg=repr(math.degrees(m.amplitude)),
                       base_interval=repr(m.base_interval), lead_in=repr(m.lead_in),
                       total_duration=repr(m.total_duration))
            if m.knots:
                sec["knots_deg"] = ",".join(repr(math.degrees(k)) for k in m.knots)
        cp[f"experiment.{e.id}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class CampaignReport:
    spec: CampaignSpec
    raw: list
    experiments: list
    validation_experiments: list
    result: object
    p_validation: AeroDerivatives
    crlb: object
    tic: object
    modes: object
    residuals: object
    validation_traces: list
    n_X: int
    n_opt: int
    designs: dict = field(default_factory=dict)
    crlb_design: object = None

    def parameter_rows(self):
        """(name, a-priori, estimated, validation set, true, std) per parameter."""
        std = self.result.std
        rows = []
        for i, n in enumerate(LON_NAMES):
            rows.append((n, self.spec.p_init.lon_array()[i], self.result.p.lon_array()[i],
                         self.p_validation.lon_array()[i], self.spec.p_true.lon_array()[i],
                         std.get(n, 0.0)))
        return rows

    def summary(self) -> dict:
        r = self.result
        return {
            "n_X": self.n_X, "n_p": len(r.free_names), "n_opt": self.n_opt,
            "converged": r.converged, "iterations": r.iterations,
            "kkt_residual": r.kkt_residual, "objective": r.objective,
            "residual_norms": dict(zip([e.id for e in self.experiments], r.residual_norms)),
            "message": r.message,
            "fixed_in_validation_set": list(self.spec.fixed),
            "tic": self.tic.values if self.tic else None,
            "tic_flagged": self.tic.flagged if self.tic else None,
            "crlb_diagnostics": self.crlb.diagnostics,
            "designed_knots_deg": {k: np.degrees(v).tolist() for k, v in self.designs.items()},
        }


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except CampaignError:
        raise
    except Exception as exc:  # noqa: BLE001 - tag and re-raise
        raise CampaignError(name, exc) from exc


def _initial_state(exp: Experiment, lead_in: float) -> np.ndarray:
    n = int(lead_in / exp.T_s)
    return exp.outputs[:n].mean(axis=0) if n >= 5 else exp.outputs[0]


def crlb_dimensional(report, V_Te: float, config: AircraftConfig):
    """Bounds restated for the dimensional derivatives at ``V_Te``.

    Rows: (name, value, 2CRLB %, 2 sigma % from F^-1). The map is affine per
    parameter, so only Z_q (which carries the kinematic unit term) changes
    its relative bound. C_m0 has no dimensional counterpart and is dropped.
    """
    gains = _conversion_gains(V_Te, config)
    values = np.array([r.value for r in report.rows])
    dim = dimensionalize(AeroDerivatives.from_lon_array(values), V_Te, config).as_array()
    out = []
    for i, (name, row) in enumerate(zip(DIMENSIONAL_NAMES, report.rows)):
        if gains[i] == 0:
            continue
        def pct(x):
            return None if x is None else 100.0 * 2 * x * gains[i] / abs(dim[i])
        out.append((name, float(dim[i]), pct(row.crlb), pct(row.sigma_cov)))
    return out


def design_stage_crlb(spec: CampaignSpec, designs: dict | None = None):
    """Expected accuracy before flying: bounds at the a-priori model along the
    planned (noise-free, unquantized) estimation maneuvers."""
    cfg, p = spec.config, spec.p_init
    parts = []
    for e in spec.estimation:
        tp = trim(e.V_Te, p, cfg)
        man = resolve_maneuver(e, (designs or {}).get(e.id))
        u = actuator_response(man.generate(e.T_s, tp.delta_e_trim), tp.delta_e_trim,
                              e.actuator_tau, e.T_s)
        s = sensitivities(tp.state, u, p, cfg, e.T_s, include_initial_state=True)
        parts.append(fisher(s, spec.sensor.sigma_y))
    return crlb(joint_fisher(parts), p.lon_array(), LON_NAMES)


def run_campaign(spec: CampaignSpec, seed: int | None = None, out_dir=None,
                 progress=None, designs: dict | None = None) -> CampaignReport:
    """trim -> design -> generate -> condition -> estimate -> validate -> report.

    ``designs`` maps experiment ids to previously designed knot values and
    skips the input design for those experiments.
    """
    say = progress or (lambda msg: None)
    seed = spec.sensor.seed if seed is None else seed
    cfg = spec.config
    seeds = np.random.SeedSequence(seed).spawn(len(spec.experiments))

    designs = dict(designs or {})
    for e in spec.experiments:
        _stage("trim", trim, e.V_Te, spec.p_true, cfg)
        if e.optimize is not None and e.id not in designs:
            say(f"designing input for {e.id}")
            designs[e.id] = _stage("design", design_experiment_input, e, spec.p_init, cfg,
                                   spec.envelope)

    raw, cond = {}, {}
    for e, ss in zip(spec.experiments, seeds):
        say(f"generating {e.id}")
        raw[e.id] = _stage("generate", generate_experiment, e, spec.p_true, ss, spec.sensor,
                           cfg, spec.envelope, designs.get(e.id))
        cond[e.id] = _stage("condition", condition, raw[e.id], spec.filter_cutoff)

    est = [cond[e.id] for e in spec.estimation]
    val = [cond[e.id] for e in spec.validation]
    problem = _stage("assemble", assemble, est, spec.p_init, ParameterMask(), cfg)
    say(f"solving: {problem.n_opt} variables")
    result = _stage("estimate", solve, problem, SolveOptions(max_iter=spec.max_iter))
    p_v = AeroDerivatives.from_lon_array(
        ParameterMask.fix(spec.fixed, spec.p_init).apply(result.p))

    def bounds():
        parts = [fisher(sensitivities(nodes[0], e.inputs, result.p, cfg, e.T_s,
                                      include_initial_state=True), e.sigma_y)
                 for e, nodes in zip(est, result.nodes)]
        return crlb(joint_fisher(parts), result.p.lon_array(), LON_NAMES)

    bound_report = _stage("crlb", bounds)
    design_report = _stage("crlb", design_stage_crlb, spec, designs)

    tic_report, traces, res_stats = None, [], None
    if val:
        def validate():
            starts = [_initial_state(v, (v.metadata.get("maneuver") or {}).get("lead_in", 0.0))
                      for v in val]
            tr = residual_traces(p_v, val, cfg, initial_states=starts)
            meas = np.vstack([v.outputs for v in val])
            pred = np.vstack([t.predicted for t in tr])
            return tr, tic(meas, pred), residual_stats(np.vstack([t.residual for t in tr]))
        traces, tic_report, res_stats = _stage("validate", validate)
    V_ref = spec.estimation[0].V_Te
    modes = _stage("validate", compare_modes, spec.p_init, p_v, V_ref, cfg)

    report = CampaignReport(spec, list(raw.values()), est, val, result, p_v, bound_report,
                            tic_report, modes, res_stats, traces, problem.n_X, problem.n_opt,
                            designs, design_report)
    if out_dir is not None:
        _stage("report", write_report, report, out_dir)
    return report


def default_out_dir(fallback="awesysid-out") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, fallback))


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, str) else _fmt(x) for x in r])


def write_report(report: CampaignReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = report.spec
    _write_csv(out / "parameters.csv",
               ("name", "a_priori", "estimated", "validation_set", "true", "std"),
               report.parameter_rows())
    _write_csv(out / "crlb.csv", ("name", "value", "two_crlb_pct", "two_sigma_cov_pct", "flag"),
               [(r.name, r.value, r.two_crlb_pct, r.two_sigma_cov_pct,
                 "poorly identifiable" if (r.two_sigma_cov_pct or math.inf) > 100 else "")
                for r in report.crlb.rows])
    if report.crlb_design is not None:
        _write_csv(out / "crlb_design.csv", ("name", "value", "two_crlb_pct", "two_sigma_cov_pct"),
                   [(r.name, r.value, r.two_crlb_pct, r.two_sigma_cov_pct)
                    for r in report.crlb_design.rows])
    _write_csv(out / "crlb_dimensional.csv", ("name", "value", "two_crlb_pct", "two_sigma_cov_pct"),
               crlb_dimensional(report.crlb, spec.estimation[0].V_Te, spec.config))
    if report.tic is not None:
        (out / "tic.csv").write_text(report.tic.to_csv())
        _write_csv(out / "residual_stats.csv", ("channel", "mean", "std"),
                   [(c, s.mean, s.std) for c, s in report.residuals.channels.items()])
        for tr in report.validation_traces:
            rows = [(t, *m, *p) for t, m, p in zip(tr.t, tr.predicted + tr.residual, tr.predicted)]
            _write_csv(out / f"trace_{tr.id}.csv",
                       ("t",) + tuple(f"{c}_meas" for c in STATE_LABELS)
                       + tuple(f"{c}_pred" for c in STATE_LABELS), rows)
    (out / "modes.csv").write_text(report.modes.to_csv())
    (out / "campaign.ini").write_text(dump_config(spec))
    for e in report.raw:
        write_experiment(e, out / "experiments" / f"{e.id}_raw.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    return out
