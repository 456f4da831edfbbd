import configparser
import filecmp
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from awesysid.airframe import LON_NAMES, SYNTHETIC_TRUTH
from awesysid.campaign import (CSV_HEADER, CampaignError, CampaignSpec, ExperimentSpec, OedSettings,
                               SensorModel, actuator_response, condition, dump_config,
                               generate_experiment, load_config, reference_campaign_spec,
                               read_experiment, run_campaign, spec_from_parser,
                               write_experiment, write_report)
from awesysid.dynamics import simulate, trim
from awesysid.maneuver import Envelope, ManeuverSpec
from awesysid.mbpe import Experiment, DEFAULT_FIXED

from conftest import A_PRIORI, CONFIG, QUIET, small_experiment

DEG = math.radians


def small_spec(**kw):
    exps = (ExperimentSpec("A", ManeuverSpec("3211", DEG(3), 0.5, 0.5, 10.0), T_s=0.05),
            ExperimentSpec("B", ManeuverSpec("doublet", DEG(3), 1.0, 0.5, 10.0), T_s=0.05),
            ExperimentSpec("V", ManeuverSpec("3211", DEG(2), 0.6, 0.5, 10.0), T_s=0.05,
                           role="validation"))
    base = dict(sensor=SensorModel(quantization=0.0, seed=7), filter_cutoff=None)
    base.update(kw)
    return CampaignSpec(exps, **base)


class TestSensorModel:
    @pytest.mark.parametrize("kw", [dict(V_T=0.0), dict(alpha=-1.0), dict(quantization=-0.1),
                                    dict(delay=-1), dict(delay=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SensorModel(**kw)

    def test_sigma_vector(self):
        np.testing.assert_allclose(SensorModel().sigma_y,
                                   [1.0, DEG(0.5), DEG(0.1), DEG(0.1)])


class TestGenerate:
    def test_noise_free_equals_simulation(self):
        e = small_experiment()
        tp = trim(20.0, SYNTHETIC_TRUTH, CONFIG)
        u = ManeuverSpec("3211", DEG(3), 0.5, 0.5, 10.0).generate(0.05, tp.delta_e_trim)
        ref = simulate(tp.state, u, 0.05, SYNTHETIC_TRUTH, CONFIG)
        np.testing.assert_array_equal(e.outputs, ref.x)
        np.testing.assert_array_equal(e.inputs, u)

    def test_same_seed_bit_identical(self):
        a = small_experiment(sensor=SensorModel(), seed=11)
        b = small_experiment(sensor=SensorModel(), seed=11)
        assert np.array_equal(a.outputs, b.outputs) and np.array_equal(a.inputs, b.inputs)
        c = small_experiment(sensor=SensorModel(), seed=12)
        assert not np.array_equal(a.outputs, c.outputs)

    def test_noise_statistics(self):
        quiet = small_experiment(total=500.0, T_s=0.05)
        noisy = small_experiment(total=500.0, T_s=0.05, sensor=SensorModel(delay=0), seed=3)
        assert noisy.n_samples > 10_000
        emp = (noisy.outputs - quiet.outputs).std(axis=0, ddof=1)
        np.testing.assert_allclose(emp, SensorModel().sigma_y, rtol=0.03)

    def test_quantized_elevator(self):
        e = small_experiment(sensor=SensorModel(noise_gain=0.0, delay=0))
        steps = e.inputs / DEG(0.25)
        np.testing.assert_allclose(steps, np.round(steps), atol=1e-9)

    def test_delay_shifts_outputs(self):
        ref = small_experiment()
        d = small_experiment(sensor=SensorModel(noise_gain=0.0, quantization=0.0, delay=2))
        assert d.n_samples == ref.n_samples + 2
        np.testing.assert_array_equal(d.outputs[2:], ref.outputs)
        np.testing.assert_array_equal(d.inputs[:ref.n_samples], ref.inputs)

    def test_envelope_truncates(self):
        spec = ExperimentSpec("X", ManeuverSpec("3211", DEG(4), 2.0, 0.5, 20.0), T_s=0.05)
        tight = Envelope(alpha=(DEG(-3), DEG(3)))
        e = generate_experiment(spec, SYNTHETIC_TRUTH, 0, QUIET, CONFIG, tight)
        assert e.metadata["aborted"] and "envelope" in e.metadata["abort_reason"]
        assert e.n_samples < 401

    def test_actuator_lag_step(self):
        tau, T_s = 0.1, 0.01
        y = actuator_response(np.ones(50), 0.0, tau, T_s)
        k = np.arange(50)
        np.testing.assert_allclose(y, 1 - np.exp(-(k + 1) * T_s / tau), rtol=1e-12)
        np.testing.assert_array_equal(actuator_response([0.3, 0.5], 0.0, 0.0, T_s), [0.3, 0.5])


class TestCondition:
    def raw(self, y, T_s=0.01, delay=0):
        n = len(y)
        return Experiment("r", T_s, np.zeros(n), np.column_stack([y] * 4), np.ones(4),
                          {"delay": delay})

    def test_dc_unchanged(self):
        out = condition(self.raw(np.full(500, 3.7)), 5.0)
        np.testing.assert_allclose(out.outputs, 3.7, rtol=1e-12)

    def test_slow_sinusoid_zero_lag(self):
        t = np.arange(4000) * 0.01
        f = 0.2
        y = np.sin(2 * np.pi * f * t)
        out = condition(self.raw(y), 5.0).outputs[:, 0]
        mid = slice(500, 3500)
        # fit amplitude and phase on the interior
        M = np.column_stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)])[mid]
        a, b = np.linalg.lstsq(M, out[mid], rcond=None)[0]
        assert abs(math.hypot(a, b) - 1) < 0.01
        assert abs(math.atan2(b, a)) < 0.01

    def test_energy_non_expansive(self, rng):
        y = rng.normal(size=2000) + np.sin(np.arange(2000) * 0.05)
        once = condition(self.raw(y), 5.0).outputs[:, 0]
        twice = condition(replace(condition(self.raw(y), 5.0), metadata={"delay": 0}),
                          5.0).outputs[:, 0]
        assert np.sum(twice ** 2) <= np.sum(once ** 2) <= np.sum(y ** 2)

    def test_delay_alignment(self):
        raw = small_experiment(sensor=SensorModel(noise_gain=0.0, quantization=0.0, delay=1))
        out = condition(raw, None)
        ref = small_experiment()
        np.testing.assert_array_equal(out.outputs, ref.outputs)
        np.testing.assert_array_equal(out.inputs, ref.inputs)
        assert out.metadata["conditioned"] and out.metadata["delay_removed"] == 1

    def test_quantized_input_passes_through(self):
        raw = small_experiment(sensor=SensorModel(noise_gain=0.0, delay=0))
        assert np.array_equal(condition(raw, 5.0).inputs, raw.inputs)

    def test_cutoff_above_nyquist(self):
        with pytest.raises(ValueError):
            condition(self.raw(np.ones(100), T_s=0.1), 5.0)

    def test_already_conditioned(self):
        out = condition(self.raw(np.ones(100)), 5.0)
        with pytest.raises(ValueError):
            condition(out, 5.0)


class TestFiles:
    def test_csv_round_trip(self, tmp_path):
        e = small_experiment(sensor=SensorModel(), seed=4)
        path = write_experiment(e, tmp_path / "e.csv")
        assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
        back = read_experiment(path)
        assert np.array_equal(back.outputs, e.outputs) and np.array_equal(back.inputs, e.inputs)
        assert np.array_equal(back.sigma_y, e.sigma_y)
        assert back.T_s == e.T_s and back.metadata == json.loads(json.dumps(e.metadata))

    def test_csv_without_sidecar(self, tmp_path):
        e = small_experiment()
        path = write_experiment(e, tmp_path / "e.csv")
        path.with_suffix(".json").unlink()
        back = read_experiment(path)
        assert back.T_s == pytest.approx(0.05) and back.id == "e"

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_experiment(p)

    def test_config_round_trip(self, tmp_path):
        spec = reference_campaign_spec()
        path = tmp_path / "c.ini"
        text = dump_config(spec)
        path.write_text(text)
        back = load_config(path)
        # angles are stored in degrees, so allow one ulp of drift
        assert dump_config(back) == text
        assert back.p_true == spec.p_true and back.sensor == spec.sensor
        for a, b in zip(back.experiments, spec.experiments):
            assert a.id == b.id and a.role == b.role and a.T_s == b.T_s
            if b.maneuver is not None:
                assert a.maneuver.amplitude == pytest.approx(b.maneuver.amplitude, rel=1e-15)
            else:
                assert a.optimize.amplitude == pytest.approx(b.optimize.amplitude, rel=1e-15)

    def test_missing_config(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(tmp_path / "nope.ini")

    def test_empty_config_gives_replica(self):
        assert spec_from_parser(configparser.ConfigParser()) == reference_campaign_spec()


@pytest.fixture(scope="module")
def report():
    return run_campaign(small_spec())


class TestRunCampaign:
    def test_empty_spec(self):
        with pytest.raises(ValueError):
            CampaignSpec(())

    def test_validation_only_spec(self):
        with pytest.raises(ValueError):
            CampaignSpec((ExperimentSpec("V", ManeuverSpec(), role="validation"),))

    def test_report_contents(self, report):
        assert report.result.converged
        assert report.n_opt == 12 + report.n_X
        assert set(report.tic.values) == {"V_T", "alpha", "theta", "q"}
        rows = report.parameter_rows()
        assert [r[0] for r in rows] == list(LON_NAMES)

    def test_validation_set_substitutes_mask(self, report):
        p_star, p_v = report.result.p.lon_array(), report.p_validation.lon_array()
        for i, name in enumerate(LON_NAMES):
            expected = getattr(A_PRIORI, name) if name in DEFAULT_FIXED else p_star[i]
            assert p_v[i] == expected

    def test_recovers_truth(self, report):
        err = np.abs(report.result.p.lon_array() - SYNTHETIC_TRUTH.lon_array())
        two_sigma = 2 * np.sqrt(np.diagonal(report.result.full_cov()))
        assert np.all(err < 3 * two_sigma)

    def test_deterministic_bundle(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_campaign(small_spec(), out_dir=a)
        run_campaign(small_spec(), out_dir=b)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert len(files) > 10
        match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
        assert not mismatch and not errors

    def test_seed_changes_data(self):
        r1 = run_campaign(small_spec(), seed=1)
        r2 = run_campaign(small_spec(), seed=2)
        assert not np.array_equal(r1.raw[0].outputs, r2.raw[0].outputs)

    @pytest.mark.parametrize("field,stage", [("p_true", "trim"), ("p_init", "design")])
    def test_stage_tagged_failure(self, field, stage):
        # no pitch authority: the trim Jacobian is singular
        untrimmable = replace(SYNTHETIC_TRUTH, Cmde=0.0, Cma=0.0, Cm0=0.5)
        spec = small_spec(**{field: untrimmable})
        opt = ExperimentSpec("O", optimize=OedSettings(n_knots=4, horizon=2.0, max_iter=1))
        spec = replace(spec, experiments=spec.experiments + (opt,))
        with pytest.raises(CampaignError) as info:
            run_campaign(spec)
        assert info.value.stage == stage

    def test_write_report(self, report, tmp_path):
        out = write_report(report, tmp_path)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_opt"] == report.n_opt and summary["converged"] is True
        crlb_lines = (out / "crlb.csv").read_text().splitlines()
        assert len(crlb_lines) == 13


def test_replica_recovers_truth_without_quantization(replica):
    """Noise-only replica (same designed inputs): every parameter lands
    within three times its 2-sigma bound."""
    spec = reference_campaign_spec(sensor=SensorModel(quantization=0.0))
    rep = run_campaign(spec, seed=0, designs=replica.designs)
    assert rep.result.converged and rep.n_opt == 35576
    err = np.abs(rep.result.p.lon_array() - SYNTHETIC_TRUTH.lon_array())
    two_sigma = 2 * np.sqrt(np.diagonal(rep.result.full_cov()))
    assert np.all(err < 3 * two_sigma), dict(zip(LON_NAMES, err / two_sigma))


def test_replica_bundle(replica, tmp_path):
    out = write_report(replica, tmp_path)
    names = {p.name for p in out.iterdir()}
    assert {"parameters.csv", "crlb.csv", "crlb_design.csv", "tic.csv", "modes.csv",
            "residual_stats.csv", "summary.json", "campaign.ini", "trace_V1.csv"} <= names
    assert len(list((out / "experiments").glob("*_raw.csv"))) == 7
