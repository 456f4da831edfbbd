import numpy as np
import pytest

from awesysid.airframe import LON_NAMES, SYNTHETIC_TRUTH
from awesysid.campaign import SensorModel
from awesysid.mbpe import (DEFAULT_FIXED, DegenerateProblemError, Experiment, ParameterMask,
                           SolveOptions, _linearize, _merit_parts, assemble, condensed_step,
                           dense_kkt_step, residual_traces, solve)
from awesysid.oed import SIGMA_Y, fisher, joint_fisher, sensitivities

from conftest import A_PRIORI, CONFIG, small_experiment

NOISY = SensorModel(quantization=0.0, delay=0)


@pytest.fixture(scope="module")
def clean():
    return [small_experiment("A"), small_experiment("B", kind="doublet", dT=1.0)]


@pytest.fixture(scope="module")
def noisy():
    return [small_experiment("A", sensor=NOISY, seed=1),
            small_experiment("B", kind="doublet", dT=1.0, sensor=NOISY, seed=2)]


@pytest.fixture(scope="module")
def noisy_fit(noisy):
    return solve(assemble(noisy, A_PRIORI, None, CONFIG))


class TestExperiment:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Experiment("x", 0.1, np.zeros(5), np.zeros((4, 4)), SIGMA_Y)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            Experiment("x", 0.1, np.zeros(5), np.zeros((5, 4)), [1, 0, 1, 1])

    def test_sample_period(self):
        with pytest.raises(ValueError):
            Experiment("x", 0.0, np.zeros(5), np.zeros((5, 4)), SIGMA_Y)


class TestAssemble:
    def test_dimensions(self, clean):
        prob = assemble(clean, A_PRIORI, ParameterMask.fix(DEFAULT_FIXED, A_PRIORI), CONFIG)
        N = [e.n_samples for e in clean]
        assert prob.n_X == 4 * (N[0] - 1) + 4 * (N[1] - 1)
        assert prob.n_p == 9 and prob.n_opt == prob.n_X + 9

    def test_all_fixed_is_degenerate(self, clean):
        with pytest.raises(DegenerateProblemError):
            assemble(clean, A_PRIORI, ParameterMask.fix(LON_NAMES, A_PRIORI))

    def test_no_experiments(self):
        with pytest.raises(DegenerateProblemError):
            assemble([], A_PRIORI)

    def test_unknown_mask_name(self):
        with pytest.raises(ValueError):
            ParameterMask({"Cxx": 0.0})

    def test_consistent_start_at_truth(self, clean):
        prob = assemble(clean, SYNTHETIC_TRUTH, None, CONFIG)
        _, _, dmax = _merit_parts(_linearize(prob, prob.nodes_init, prob.p_init))
        assert dmax < 1e-12


class TestSteps:
    def test_condensed_equals_dense_kkt(self):
        exps = [small_experiment("A", total=2.0, dT=0.2, lead_in=0.1, T_s=0.1, sensor=NOISY, seed=5),
                small_experiment("B", kind="doublet", total=2.0, dT=0.5, lead_in=0.1, T_s=0.1,
                                 sensor=NOISY, seed=6)]
        assert [e.n_samples for e in exps] == [21, 21]
        prob = assemble(exps, A_PRIORI, ParameterMask.fix(DEFAULT_FIXED, A_PRIORI), CONFIG)
        dn_c, dp_c = condensed_step(prob)
        dn_d, dp_d = dense_kkt_step(prob)
        np.testing.assert_allclose(dp_c, dp_d, rtol=1e-8, atol=1e-12 * np.abs(dp_d).max())
        for a, b in zip(dn_c, dn_d):
            np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-8 * np.abs(b).max())


class TestSolve:
    def test_exact_recovery(self, clean):
        res = solve(assemble(clean, A_PRIORI, None, CONFIG))
        assert res.converged and res.iterations <= 50
        rel = np.abs(res.p.lon_array() / SYNTHETIC_TRUTH.lon_array() - 1)
        assert rel.max() < 1e-6
        assert res.kkt_residual < 1e-8

    def test_merit_never_increases(self, noisy_fit):
        merit = [h["merit"] for h in noisy_fit.history]
        assert np.all(np.diff(merit) <= 1e-9 * merit[0])

    def test_covariance_symmetric_psd(self, noisy_fit):
        C = noisy_fit.cov
        np.testing.assert_allclose(C, C.T, rtol=0, atol=1e-14 * np.abs(C).max())
        assert np.linalg.eigvalsh(C).min() > 0

    def test_covariance_equals_fisher_inverse(self, noisy, noisy_fit):
        parts = [fisher(sensitivities(n[0], e.inputs, noisy_fit.p, CONFIG, e.T_s,
                                      include_initial_state=True), e.sigma_y)
                 for e, n in zip(noisy, noisy_fit.nodes)]
        J = joint_fisher(parts)
        cov = np.linalg.inv(J.F)[-12:, -12:]
        np.testing.assert_allclose(noisy_fit.cov, cov, rtol=1e-8, atol=1e-8 * np.abs(cov).max())

    def test_duplicate_experiment(self, noisy):
        one = solve(assemble(noisy[:1], A_PRIORI, None, CONFIG))
        two = solve(assemble(noisy[:1] * 2, A_PRIORI, None, CONFIG))
        np.testing.assert_allclose(two.p.lon_array(), one.p.lon_array(), rtol=1e-8)
        np.testing.assert_allclose(two.cov, one.cov / 2, rtol=1e-6)

    def test_permutation_invariance(self, noisy, noisy_fit):
        rev = solve(assemble(noisy[::-1], A_PRIORI, None, CONFIG))
        np.testing.assert_allclose(rev.p.lon_array(), noisy_fit.p.lon_array(), rtol=1e-10, atol=1e-12)

    def test_mask_values_are_bit_identical(self, noisy):
        mask = ParameterMask.fix(DEFAULT_FIXED, A_PRIORI)
        res = solve(assemble(noisy, A_PRIORI, mask, CONFIG))
        for name in DEFAULT_FIXED:
            assert getattr(res.p, name) == getattr(A_PRIORI, name)
        assert res.free_names == tuple(n for n in LON_NAMES if n not in DEFAULT_FIXED)
        assert np.all(res.full_cov()[[LON_NAMES.index(n) for n in DEFAULT_FIXED]] == 0)

    def test_noisy_errors_within_bounds(self, noisy_fit):
        err = np.abs(noisy_fit.p.lon_array() - SYNTHETIC_TRUTH.lon_array())
        assert np.all(err < 3 * 2 * np.sqrt(np.diagonal(noisy_fit.cov)))

    def test_iteration_budget(self, noisy):
        res = solve(assemble(noisy, A_PRIORI, None, CONFIG), SolveOptions(max_iter=1))
        assert not res.converged and res.iterations == 1
        assert "budget" in res.message

    def test_residual_norms_per_experiment(self, noisy_fit, noisy):
        assert len(noisy_fit.residual_norms) == len(noisy)
        # weighted residual norm squared is close to the number of residuals
        for e, r in zip(noisy, noisy_fit.residual_norms):
            assert 0.7 < r ** 2 / (4 * e.n_samples) < 1.3


class TestResidualTraces:
    def test_perfect_fit(self, clean):
        tr = residual_traces(SYNTHETIC_TRUTH, clean, CONFIG)
        for t in tr:
            assert np.abs(t.residual).max() < 1e-12

    def test_constant_bias(self, clean):
        e = clean[0]
        biased = Experiment(e.id, e.T_s, e.inputs, e.outputs + [0, 0.01, 0, 0], e.sigma_y)
        tr = residual_traces(SYNTHETIC_TRUTH, [biased], CONFIG,
                             initial_states=[e.outputs[0]])[0]
        assert tr.mean[1] == pytest.approx(0.01, rel=1e-9)
        assert tr.std[1] == pytest.approx(0.0, abs=1e-12)

    def test_from_result_starts_at_first_node(self, noisy_fit, noisy):
        tr = residual_traces(noisy_fit, noisy, CONFIG)
        for t, n in zip(tr, noisy_fit.nodes):
            np.testing.assert_array_equal(t.predicted[0], n[0])
