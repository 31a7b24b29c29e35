"""Shared fixtures: a desk-scale test system and the paper-scale mode.

The scaled system (100 kHz, Q = 100, 1 pg, room temperature) keeps Monte
Carlo runs cheap while preserving every dimensionless ratio that matters:
the probe fixture is calibrated so the thermal-to-noise ratio
A = 8 eta n_th C / V_d equals 7.76, the value back-solved from the quoted
room-temperature cooling minimum.
"""

import math

import numpy as np
import pytest

from sqzcool import MechanicalMode, ProbeState, noise_calibration

KAPPA = 2 * math.pi * 94.0e6
N_C = 5.1e4


@pytest.fixture(scope="session")
def scaled_mode():
    return MechanicalMode.from_hz(100.0e3, 1.0e3, 1.0e-12, 295.0)


@pytest.fixture(scope="session")
def paper_mode():
    return MechanicalMode.from_hz(6.13e6, 13.0e3, 1.0e-8, 295.0)


def probe_for_ratio(mode, a, v_sq=0.5, eta_d=1.0):
    """Coherent-or-squeezed probe whose thermal-to-noise ratio is `a`."""
    v_d = eta_d * v_sq + (1 - eta_d) * 0.5
    n_th = mode.thermal_occupancy()
    c = a * v_d / (8 * n_th)
    kwargs = {} if v_sq == 0.5 and eta_d == 1.0 else \
        {"v_sq": v_sq, "eta_d": eta_d}
    return ProbeState.from_cooperativity(c, mode.gamma_m, N_C, KAPPA, **kwargs)


@pytest.fixture(scope="session")
def scaled_probe(scaled_mode):
    probe = probe_for_ratio(scaled_mode, 7.76)
    assert abs(noise_calibration(scaled_mode, probe) - 7.76) < 1e-12
    return probe


@pytest.fixture(scope="session")
def traj_off(scaled_mode, scaled_probe):
    """One feedback-off run of the scaled system, shared across test files."""
    from sqzcool.simulate import FeedbackConfig, SimConfig, run
    cfg = SimConfig(mode=scaled_mode, probe=scaled_probe,
                    feedback=FeedbackConfig(mode="off"),
                    sample_rate=2.0e6, duration=2.0, seed=7)
    return run(cfg)


@pytest.fixture(scope="session")
def traj_g3(scaled_mode, scaled_probe):
    """One gain-3 viscous run of the scaled system, shared across test files."""
    from sqzcool.simulate import FeedbackConfig, SimConfig, run
    cfg = SimConfig(mode=scaled_mode, probe=scaled_probe,
                    feedback=FeedbackConfig(mode="ideal_viscous", gain=3.0),
                    sample_rate=2.0e6, duration=2.0, seed=11)
    return run(cfg)


def rel_err(a, b):
    return abs(a / b - 1.0)


np.seterr(all="raise", under="ignore")
