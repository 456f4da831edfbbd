import math

import numpy as np
import pytest

from awesysid.airframe import AeroDerivatives, AircraftConfig, SYNTHETIC_TRUTH
from awesysid.campaign import ExperimentSpec, SensorModel, generate_experiment, reference_campaign_spec, \
    run_campaign
from awesysid.maneuver import ManeuverSpec

A_PRIORI = AeroDerivatives()
CONFIG = AircraftConfig()
QUIET = SensorModel(noise_gain=0.0, quantization=0.0, delay=0)


def small_experiment(id="A", kind="3211", amp_deg=3.0, dT=0.5, total=10.0, T_s=0.05,
                     sensor=QUIET, seed=0, p_true=SYNTHETIC_TRUTH, lead_in=0.5):
    spec = ExperimentSpec(id, ManeuverSpec(kind, math.radians(amp_deg), dT, lead_in, total),
                          T_s=T_s)
    return generate_experiment(spec, p_true, seed, sensor, CONFIG)


@pytest.fixture(scope="session")
def replica():
    """The full reference campaign at seed 0 (about a minute)."""
    return run_campaign(reference_campaign_spec(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
