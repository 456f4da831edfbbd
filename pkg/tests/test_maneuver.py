import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awesysid.maneuver import (Envelope, ManeuverError, ManeuverKind, ManeuverSpec, generate_3211,
                               generate_doublet, generate_piecewise, monitor, n_samples)


def switch_times(u, T_s):
    return [round(k * T_s, 9) for k in np.nonzero(np.diff(u))[0] + 1]


def test_3211_switching_times():
    u = generate_3211(1.0, 0.6, 0.01, 0.0, 20.0)
    assert switch_times(u, 0.01) == [1.8, 3.0, 3.6, 4.2]
    assert u[0] == 1.0 and u[200] == -1.0 and u[330] == 1.0 and u[400] == -1.0 and u[420] == 0.0


def test_3211_zero_amplitude():
    assert not np.any(generate_3211(0.0, 0.6, 0.01, 1.0, 20.0))


def test_3211_integral():
    u = generate_3211(0.5, 0.6, 0.01, 0.0, 20.0)
    assert np.sum(u) * 0.01 == pytest.approx(0.5 * 0.6, abs=1e-12)


def test_doublet():
    u = generate_doublet(1.0, 0.5, 0.01, 0.0, 10.0)
    assert switch_times(u, 0.01) == [0.5, 1.0]
    assert np.sum(u) == 0.0


def test_piecewise_holds_each_knot():
    u = generate_piecewise([0.1, -0.2, 0.3], 1.0, 0.1, 0.5, 4.0)
    assert len(u) == n_samples(4.0, 0.1) == 41
    np.testing.assert_array_equal(u[:5], 0.0)
    np.testing.assert_array_equal(u[5:15], 0.1)
    np.testing.assert_array_equal(u[15:25], -0.2)
    np.testing.assert_array_equal(u[25:35], 0.3)
    np.testing.assert_array_equal(u[35:], 0.0)


@pytest.mark.parametrize("fn", [generate_3211, generate_doublet])
def test_too_short_raises(fn):
    with pytest.raises(ManeuverError):
        fn(1.0, 2.0, 0.01, 1.0, 3.0)


def test_non_positive_interval():
    with pytest.raises(ManeuverError):
        generate_3211(1.0, 0.0, 0.01)


@given(A=st.floats(0.001, 0.2), dT=st.sampled_from([0.2, 0.3, 0.5, 0.6, 1.0]),
       lead=st.integers(0, 50))
@settings(max_examples=40, deadline=None)
def test_3211_properties(A, dT, lead):
    T_s = 0.01
    u = generate_3211(A, dT, T_s, lead * T_s, 20.0)
    assert set(np.unique(u)) <= {A, -A, 0.0}
    active = u[u != 0]
    assert np.count_nonzero(np.diff(np.sign(active))) == 3
    assert np.sum(u ** 2) * T_s == pytest.approx(A * A * 7 * dT, rel=1e-9)


@given(shift=st.integers(1, 100))
@settings(max_examples=25, deadline=None)
def test_grid_shift_equivariance(shift):
    T_s = 0.01
    a = generate_3211(0.05, 0.6, T_s, 0.5, 20.0)
    b = generate_3211(0.05, 0.6, T_s, 0.5 + shift * T_s, 20.0)
    np.testing.assert_array_equal(b[shift:], a[:-shift])
    np.testing.assert_array_equal(b[:shift], 0.0)


def test_deterministic():
    spec = ManeuverSpec("3211", 0.03, 0.6, 1.0, 20.0)
    assert np.array_equal(spec.generate(0.01, -0.02), spec.generate(0.01, -0.02))


class TestManeuverSpec:
    def test_superimposed_on_trim(self):
        u = ManeuverSpec("doublet", 0.1, 0.5, 0.0, 2.0).generate(0.1, -0.02)
        assert u[0] == pytest.approx(0.08) and u[-1] == pytest.approx(-0.02)

    def test_envelope_is_an_error_not_a_clip(self):
        spec = ManeuverSpec("3211", math.radians(9), 0.6, 1.0, 20.0)
        with pytest.raises(ManeuverError):
            spec.generate(0.01, math.radians(-2), Envelope())

    def test_kind_coercion(self):
        assert ManeuverSpec("piecewise", 0.1, 0.5, 0, 5, knots=[0.1]).kind is \
            ManeuverKind.PIECEWISE_CONSTANT

    def test_piecewise_needs_knots(self):
        with pytest.raises(ManeuverError):
            ManeuverSpec("piecewise", 0.1, 0.5, 0, 5)

    def test_duration_check(self):
        with pytest.raises(ManeuverError):
            ManeuverSpec("3211", 0.1, 1.0, 1.0, 5.0)


class TestMonitor:
    def test_ok_within_bounds(self):
        x = np.tile([20.0, 0.0, 0.0, 0.0], (50, 1))
        assert monitor(x, Envelope()).ok

    def test_reports_first_violation(self):
        x = np.tile([20.0, 0.0, 0.0, 0.0], (50, 1))
        x[17, 0] = 31.0
        x[30, 1] = 1.0
        assert monitor(x, Envelope()) == (False, 17, "V_T")

    def test_violation_at_first_sample(self):
        x = np.tile([20.0, 0.0, 0.0, 0.0], (5, 1))
        x[0, 3] = 2.0
        assert monitor(x, Envelope()) == (False, 0, "q")

    def test_input_channel(self):
        x = np.tile([20.0, 0.0, 0.0, 0.0], (5, 1))
        u = np.array([0, 0, 0.5, 0, 0])
        assert monitor(x, Envelope(), u) == (False, 2, "delta_e")

    def test_envelope_ordering(self):
        with pytest.raises(ValueError):
            Envelope(V_T=(30.0, 12.0))
