"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver did not
converge.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .airframe import LON_NAMES, AeroDerivatives
from .campaign import (CampaignError, _initial_state, condition, default_out_dir, load_config, reference_campaign_spec,
                       read_experiment, run_campaign, spec_from_parser, write_report)
from .dynamics import STATE_LABELS, TrimError, simulate, trim
from .maneuver import ManeuverSpec
from .mbpe import ParameterMask, SolveOptions, assemble, residual_traces, solve
from .oed import OedProblem, crlb, design_input, fisher, joint_fisher, sensitivities
from .validation import tic

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


class NotConverged(RuntimeError):
    pass


def _spec(args):
    if args.config:
        return load_config(args.config)
    return spec_from_parser(configparser.ConfigParser())


def _emit(args, name: str, header, rows, extra: dict | None = None):
    """Write a table to <out>/<name>.<fmt> when --out is given, else stdout."""
    if args.format == "json":
        doc = {"columns": list(header), "rows": [list(r) for r in rows]}
        if extra:
            doc.update(extra)
        text = json.dumps(doc, indent=2, default=float)
    else:
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(x if isinstance(x, str) else repr(float(x)) for x in r))
        text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{name}.{args.format}"
        path.write_text(text)
        print(path)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _maneuver(args) -> ManeuverSpec:
    knots = tuple(math.radians(float(k)) for k in args.knots.split(",")) if args.knots else ()
    return ManeuverSpec(args.kind, math.radians(args.amplitude), args.interval,
                        args.lead_in, args.duration, knots)


def cmd_trim(args):
    spec = _spec(args)
    tp = trim(args.speed, spec.p_init, spec.config)
    row = (tp.V_Te, tp.alpha_e, tp.theta_e, tp.delta_e_trim, tp.residual_norm)
    _emit(args, "trim", ("V_Te", "alpha", "theta", "delta_e", "residual_norm"), [row])


def cmd_maneuver(args):
    man = _maneuver(args)
    u = man.generate(args.dt)
    t = np.arange(len(u)) * args.dt
    _emit(args, "maneuver", ("t", "delta_e"), zip(t, u))


def cmd_simulate(args):
    spec = _spec(args)
    p = spec.p_true if args.truth else spec.p_init
    tp = trim(args.speed, p, spec.config)
    u = _maneuver(args).generate(args.dt, tp.delta_e_trim)
    traj = simulate(tp.state, u, args.dt, p, spec.config, envelope=spec.envelope)
    rows = [(t, d, *x) for t, d, x in zip(traj.t, traj.delta_e, traj.x)]
    extra = {"aborted": traj.aborted, "abort_reason": traj.abort_reason}
    _emit(args, "trajectory", ("t", "delta_e") + STATE_LABELS, rows, extra)
    if traj.aborted:
        logging.warning("envelope violated (%s) at sample %s", traj.abort_reason,
                        traj.abort_index)


def cmd_oed(args):
    spec = _spec(args)
    tp = trim(args.speed, spec.p_init, spec.config)
    prob = OedProblem(x0=tp.state, delta_e_trim=tp.delta_e_trim, n_knots=args.n_knots,
                      amplitude=math.radians(args.amplitude), horizon=args.horizon,
                      criterion=args.criterion, envelope=spec.envelope, max_iter=args.max_iter)
    res = design_input(prob, spec.p_init, spec.config)
    rows = [(i * prob.knot_interval, math.degrees(k)) for i, k in enumerate(res.knots)]
    _emit(args, "oed", ("t_start", "knot_deg"), rows,
          {"criterion": res.criterion, "initial_criterion": res.initial_criterion,
           "feasible": res.feasible, "diagnostic": res.diagnostic})
    logging.info("criterion %.6g (3-2-1-1 start %.6g)", res.criterion, res.initial_criterion)


def _experiments(args, spec):
    """Load recordings; raw ones are conditioned as in the campaign pipeline."""
    if not args.experiment:
        raise ValueError("at least one --experiment file is required")
    out = []
    for path in args.experiment:
        e = read_experiment(path)
        out.append(e if e.metadata.get("conditioned") else condition(e, spec.filter_cutoff))
    return out


def cmd_crlb(args):
    spec = _spec(args)
    parts = []
    for e in _experiments(args, spec):
        s = sensitivities(e.outputs[0], e.inputs, spec.p_init, spec.config, e.T_s,
                          include_initial_state=True)
        parts.append(fisher(s, e.sigma_y))
    rep = crlb(joint_fisher(parts), spec.p_init.lon_array(), LON_NAMES)
    _emit(args, "crlb", ("name", "value", "two_crlb_pct", "two_sigma_cov_pct"),
          [(r.name, r.value, r.two_crlb_pct or math.nan, r.two_sigma_cov_pct or math.nan)
           for r in rep.rows], {"diagnostics": rep.diagnostics})


def cmd_estimate(args):
    spec = _spec(args)
    exps = _experiments(args, spec)
    mask = ParameterMask.fix(args.fix.split(","), spec.p_init) if args.fix else ParameterMask()
    res = solve(assemble(exps, spec.p_init, mask, spec.config),
                SolveOptions(max_iter=args.max_iter))
    std = res.std
    rows = [(n, spec.p_init.lon_array()[i], res.p.lon_array()[i], std.get(n, 0.0))
            for i, n in enumerate(LON_NAMES)]
    _emit(args, "parameters", ("name", "a_priori", "estimated", "std"), rows,
          {"converged": res.converged, "iterations": res.iterations,
           "kkt_residual": res.kkt_residual, "message": res.message})
    if not res.converged:
        raise NotConverged(res.message)


def _read_params(path) -> AeroDerivatives:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = "validation_set" if "validation_set" in rows[0] else "estimated"
    values = {r["name"]: float(r[col]) for r in rows}
    return AeroDerivatives(**{n: values[n] for n in LON_NAMES})


def cmd_validate(args):
    spec = _spec(args)
    p = _read_params(args.params) if args.params else spec.p_init
    exps = _experiments(args, spec)
    starts = [_initial_state(e, (e.metadata.get("maneuver") or {}).get("lead_in", 0.0))
              for e in exps]
    traces = residual_traces(p, exps, spec.config, initial_states=starts)
    meas = np.vstack([e.outputs for e in exps])
    pred = np.vstack([t.predicted for t in traces])
    rep = tic(meas, pred)
    _emit(args, "tic", ("metric",) + STATE_LABELS, [("TIC", *rep.values.values())],
          {"flagged": rep.flagged, "threshold": rep.threshold})


def cmd_campaign(args):
    spec = _spec(args) if args.config else reference_campaign_spec()
    out = Path(args.out) if args.out else default_out_dir()
    report = run_campaign(spec, seed=args.seed, progress=logging.info)
    write_report(report, out)
    print(out)
    if not report.result.converged:
        raise NotConverged(report.result.message)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="awesysid",
                                 description="Longitudinal flight-test identification toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="campaign INI file")
    common.add_argument("--out", help="output directory (default: stdout, or $AWESYSID_OUT "
                                      "for campaigns)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    def maneuver_opts(p):
        p.add_argument("--kind", default="3211", choices=("3211", "doublet", "piecewise"))
        p.add_argument("--amplitude", type=float, default=2.0, help="deg")
        p.add_argument("--interval", type=float, default=0.6, help="base interval (s)")
        p.add_argument("--lead-in", type=float, default=1.0)
        p.add_argument("--duration", type=float, default=20.0)
        p.add_argument("--knots", help="comma-separated knot values in deg (piecewise)")
        p.add_argument("--dt", type=float, default=0.01)

    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("trim", parents=[common], help="trim the a-priori model")
    p.add_argument("--speed", type=float, default=20.0)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("maneuver", parents=[common], help="generate an elevator sequence")
    maneuver_opts(p)
    p.set_defaults(func=cmd_maneuver)

    p = sub.add_parser("simulate", parents=[common], help="simulate a maneuver from trim")
    p.add_argument("--speed", type=float, default=20.0)
    p.add_argument("--truth", action="store_true", help="use the true instead of a-priori set")
    maneuver_opts(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oed", parents=[common], help="design an optimal input")
    p.add_argument("--speed", type=float, default=20.0)
    p.add_argument("--n-knots", type=int, default=20)
    p.add_argument("--amplitude", type=float, default=3.0, help="deg")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--criterion", choices=("A", "D"), default="A")
    p.add_argument("--max-iter", type=int, default=30)
    p.set_defaults(func=cmd_oed)

    for name, fn, helptext in (("crlb", cmd_crlb, "Cramer-Rao bounds for recorded inputs"),
                               ("estimate", cmd_estimate, "estimate parameters"),
                               ("validate", cmd_validate, "Theil coefficients")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--experiment", action="append", help="experiment CSV (repeatable)")
        if name == "estimate":
            p.add_argument("--fix", help="comma-separated parameters held at a-priori values")
            p.add_argument("--max-iter", type=int, default=100)
        if name == "validate":
            p.add_argument("--params", help="parameters.csv from an estimate or campaign run")
        p.set_defaults(func=fn)

    p = sub.add_parser("campaign", parents=[common], help="run a full synthetic campaign")
    p.set_defaults(func=cmd_campaign)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NotConverged as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except CampaignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.stage == "estimate" and isinstance(exc.cause, RuntimeError):
            return EXIT_NONCONVERGED
        return EXIT_INVALID
    except TrimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ValueError, KeyError, OSError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
