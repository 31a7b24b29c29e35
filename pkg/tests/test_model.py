"""Closed-form model layer: unit conversions, probe algebra, cooling formulas."""

import math

import pytest
from hypothesis import given, strategies as st
from scipy.constants import hbar, k as k_B

from sqzcool import (
    CavityVariance,
    MechanicalMode,
    ProbeState,
    cooling_curve,
    cooperativity,
    coherent_occupancy_floor,
    db_from_variance,
    detected_variance,
    effective_efficiency,
    interaction_strength,
    measurement_rate,
    minimum_temperature,
    noise_calibration,
    optimal_gain,
    predict_temperature,
    squeezing_sweep,
    thermal_decoherence_rate,
    variance_from_db,
)
from conftest import KAPPA, N_C, probe_for_ratio, rel_err

ETA_PAPER = 0.4210829156058897  # detection efficiency pairing 8 dB -> 1.9 dB


# ---------------------------------------------------------------- units

def test_vacuum_is_zero_db():
    assert variance_from_db(0.0) == 0.5
    assert db_from_variance(0.5) == 0.0


@given(st.floats(min_value=-30, max_value=30))
def test_db_round_trip(db):
    assert math.isclose(db_from_variance(variance_from_db(db)), db,
                        rel_tol=0, abs_tol=1e-9)


def test_db_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        db_from_variance(0.0)
    with pytest.raises(ValueError):
        db_from_variance(-1.0)


# ---------------------------------------------------------------- mode

def test_mode_derived_quantities(paper_mode):
    assert rel_err(paper_mode.frequency_hz, 6.13e6) < 1e-12
    assert rel_err(paper_mode.quality_factor, 6.13e6 / 13e3) < 1e-12
    # sqrt(hbar / 2 m Omega) for the 6.13 MHz, 10 ng mode
    assert rel_err(paper_mode.x_zpf, 1.17e-17) < 0.01
    assert rel_err(paper_mode.thermal_variance(),
                   k_B * 295.0 / (1e-8 * paper_mode.omega_m ** 2)) < 1e-12


def test_thermal_occupancy_forms(paper_mode):
    n_ht = paper_mode.thermal_occupancy()
    n_exact = paper_mode.thermal_occupancy(exact=True)
    ratio = hbar * paper_mode.omega_m / (k_B * 295.0)
    assert rel_err(n_ht, 1 / ratio) < 1e-12
    assert rel_err(n_exact, 1 / math.expm1(ratio)) < 1e-12
    # high-temperature form overestimates the Bose occupancy by ~1/2
    assert 0.49 < n_ht - n_exact < 0.51
    assert rel_err(n_ht, 1.0e6) < 0.01


def test_mode_validation():
    with pytest.raises(ValueError):
        MechanicalMode.from_hz(1e5, 2e5, 1e-12, 295.0)  # overdamped
    with pytest.raises(ValueError):
        MechanicalMode.from_hz(1e5, 1e3, -1e-12, 295.0)
    with pytest.raises(ValueError):
        MechanicalMode.from_hz(1e5, 1e3, 1e-12, -1.0)
    assert MechanicalMode.from_hz(1e5, 1e3, 1e-12, 0.0).thermal_occupancy() == 0.0


# ---------------------------------------------------------------- probe

def test_detected_variance_limits():
    p = ProbeState(N_C, 100.0, KAPPA, v_sq=0.1, eta_d=1.0)
    assert detected_variance(p) == 0.1
    p_coh = ProbeState.coherent(N_C, 100.0, KAPPA)
    assert detected_variance(p_coh) == 0.5
    # total loss washes any squeezing back to vacuum
    p_lossy = ProbeState(N_C, 100.0, KAPPA, v_sq=0.05, eta_d=1e-12)
    assert rel_err(detected_variance(p_lossy), 0.5) < 1e-9


def test_paper_squeezing_loss_pairing():
    """8 dB of source squeezing through 42.1% efficiency detects as 1.9 dB."""
    p = ProbeState(N_C, 100.0, KAPPA).with_squeezing_db(8.0)
    p = ProbeState(N_C, 100.0, KAPPA, v_sq=p.v_sq, eta_d=ETA_PAPER)
    v_d = detected_variance(p)
    assert abs(db_from_variance(v_d) - (-1.9)) < 1e-9
    assert rel_err(v_d, 0.5 * 10 ** -0.19) < 1e-12


def test_with_squeezing_db():
    p = ProbeState.coherent(N_C, 100.0, KAPPA)
    sq = p.with_squeezing_db(3.0)
    assert rel_err(sq.v_sq, 0.5 * 10 ** -0.3) < 1e-12
    assert sq.quadrature == "phase_squeezed"
    assert p.with_squeezing_db(0.0).quadrature == "coherent"
    # sign convention: the argument is dB *below* vacuum either way
    assert p.with_squeezing_db(-3.0).v_sq == sq.v_sq


def test_probe_validation():
    with pytest.raises(ValueError):
        ProbeState(N_C, -1.0, KAPPA)
    with pytest.raises(ValueError):
        ProbeState(N_C, 100.0, KAPPA, eta_d=0.0)
    with pytest.raises(ValueError):
        ProbeState(N_C, 100.0, KAPPA, eta_d=1.5)
    with pytest.raises(ValueError):
        ProbeState(N_C, 100.0, KAPPA, v_sq=0.0)
    with pytest.raises(ValueError):
        ProbeState(N_C, 100.0, KAPPA, v_sq=0.2, quadrature="coherent")
    with pytest.raises(ValueError):
        ProbeState(N_C, 100.0, KAPPA, quadrature="banana")


def test_cooperativity_round_trip(paper_mode):
    p = ProbeState.from_cooperativity(5.2e-4, paper_mode.gamma_m, N_C, KAPPA)
    assert rel_err(cooperativity(p, paper_mode), 5.2e-4) < 1e-10
    # C is quadratic in g0 and linear in photon number
    p2 = ProbeState(p.n_c, 2 * p.g0, p.kappa)
    assert rel_err(cooperativity(p2, paper_mode), 4 * 5.2e-4) < 1e-10


# ---------------------------------------------------------------- rates

def test_measurement_rate_squeezing_boost(paper_mode):
    """Lowering V_d by 1.9 dB raises the measurement rate by 1.55x."""
    coh = ProbeState.from_cooperativity(5.2e-4, paper_mode.gamma_m, N_C, KAPPA)
    sq = ProbeState(coh.n_c, coh.g0, coh.kappa, v_sq=0.5 * 10 ** -0.19)
    ratio = measurement_rate(paper_mode, sq) / measurement_rate(paper_mode, coh)
    assert rel_err(ratio, 10 ** 0.19) < 1e-12
    assert abs(ratio - 1.55) < 0.01
    # halving the detected variance doubles the rate
    half = ProbeState(coh.n_c, coh.g0, coh.kappa, v_sq=0.25)
    assert rel_err(measurement_rate(paper_mode, half)
                   / measurement_rate(paper_mode, coh), 2.0) < 1e-12


def test_thermal_decoherence_dominates_weak_measurement(paper_mode):
    gamma_th = thermal_decoherence_rate(paper_mode)
    assert rel_err(gamma_th, paper_mode.gamma_m * paper_mode.thermal_occupancy()) < 1e-12
    coh = ProbeState.from_cooperativity(5.2e-4, paper_mode.gamma_m, N_C, KAPPA)
    mu = measurement_rate(paper_mode, coh)
    # room-temperature regime: decoherence far outruns the measurement
    assert gamma_th / mu > 1e3


def test_no_transduction_raises(paper_mode):
    p = ProbeState(N_C, 0.0, KAPPA)
    with pytest.raises(ValueError, match="transduction"):
        noise_calibration(paper_mode, p)


# ---------------------------------------------------------------- cooling

def test_zero_gain_is_bath_temperature(scaled_mode, scaled_probe):
    pred = predict_temperature(scaled_mode, scaled_probe, 0.0)
    assert pred.t_fb == pytest.approx(295.0, rel=1e-12)
    assert pred.ratio == pytest.approx(1.0, rel=1e-12)
    assert rel_err(pred.n_fb, k_B * 295.0 / (hbar * scaled_mode.omega_m)) < 1e-12


def test_coherent_minimum_matches_quoted_value(scaled_mode, scaled_probe):
    t_min = minimum_temperature(scaled_mode, scaled_probe)
    assert rel_err(t_min, 149.0) < 1e-3
    g_opt = optimal_gain(scaled_mode, scaled_probe)
    assert rel_err(g_opt, math.sqrt(8.76) - 1) < 1e-12
    assert rel_err(predict_temperature(scaled_mode, scaled_probe, g_opt).t_fb,
                   t_min) < 1e-12


def test_squeezed_minimum_and_reduction(scaled_mode, scaled_probe):
    sq = scaled_probe.with_squeezing_db(1.9)
    t_coh = minimum_temperature(scaled_mode, scaled_probe)
    t_sq = minimum_temperature(scaled_mode, sq)
    assert rel_err(t_sq, 130.0) < 0.025
    assert 1 - t_sq / t_coh >= 0.12


@given(st.floats(min_value=-10, max_value=10))
def test_optimal_gain_closed_form(log_a):
    """2 T0 / (sqrt(1+A)+1) is the exact minimum of (1 + G^2/A)/(1 + G)."""
    a = 10.0 ** log_a
    t0 = 295.0
    g_opt = math.sqrt(1 + a) - 1

    def t_fb(g):
        return (1 + g * g / a) * t0 / (1 + g)

    t_min = 2 * t0 / (math.sqrt(1 + a) + 1)
    assert rel_err(t_fb(g_opt), t_min) < 1e-12
    for g in (g_opt * 0.9, g_opt * 1.1, g_opt + 1e-6):
        assert t_fb(g) >= t_min * (1 - 1e-12)


def test_optimal_gain_strong_measurement(paper_mode):
    """Fig.-1d-style parameters: C = 1e3 at eta_d = 0.1 gives G_opt ~ 1.3e4."""
    bath = MechanicalMode(paper_mode.omega_m, paper_mode.gamma_m,
                          paper_mode.mass_eff, 2.941936003973493)
    p = ProbeState.from_cooperativity(1.0e3, bath.gamma_m, N_C, KAPPA, eta_d=0.1)
    a = noise_calibration(bath, p)
    assert a > 1e7
    assert rel_err(optimal_gain(bath, p), math.sqrt(1 + a) - 1) < 1e-12


def test_cooling_curve_shape(scaled_mode, scaled_probe):
    gains = [0.0, 1.0, 2.0, optimal_gain(scaled_mode, scaled_probe), 10.0, 30.0]
    curve = cooling_curve(scaled_mode, scaled_probe, gains)
    temps = [c.t_fb for c in curve]
    t_min = minimum_temperature(scaled_mode, scaled_probe)
    assert min(temps) == pytest.approx(t_min, rel=1e-12)
    assert temps[0] == pytest.approx(295.0)
    # overdriving past the optimum heats again
    assert temps[-1] > t_min


def test_negative_gain_rejected(scaled_mode, scaled_probe):
    with pytest.raises(ValueError):
        predict_temperature(scaled_mode, scaled_probe, -0.1)


# ------------------------------------------------ efficiency formulas

def test_coherent_occupancy_floor_values():
    assert coherent_occupancy_floor(1.0) == 0.0
    assert rel_err(coherent_occupancy_floor(0.25), 0.5) < 1e-12
    n = coherent_occupancy_floor(0.23)
    assert rel_err(n, 1 / (2 * math.sqrt(0.23)) - 0.5) < 1e-12
    assert abs(n - 0.5426) < 5e-4
    with pytest.raises(ValueError):
        coherent_occupancy_floor(0.0)


def test_effective_efficiency_values():
    assert effective_efficiency(1.0, 10.0) == 1.0
    assert rel_err(effective_efficiency(0.3, 0.5), 0.3) < 1e-12
    eta = effective_efficiency(0.23, CavityVariance.from_db(9.0))
    assert abs(eta - 0.7035) < 5e-4
    # monotone in the anti-squeezed variance, saturating at 1
    vals = [effective_efficiency(0.23, v) for v in (0.5, 2.0, 10.0, 1e6)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 1 - 1e-5


def test_cavity_variance_warns_below_vacuum():
    with pytest.warns(UserWarning):
        CavityVariance(0.1)
    with pytest.raises(ValueError):
        CavityVariance(0.0)


def test_interaction_strength_scaling():
    p = ProbeState(N_C, 100.0, KAPPA)
    chi = interaction_strength(p)
    assert rel_err(chi, 4 * 100.0 * math.sqrt(N_C) / KAPPA) < 1e-12
    p4 = ProbeState(4 * N_C, 100.0, KAPPA)
    assert rel_err(interaction_strength(p4), 2 * chi) < 1e-12
    assert interaction_strength(ProbeState(N_C, 0.0, KAPPA)) == 0.0


# ---------------------------------------------------------------- sweeps

def test_squeezing_sweep_monotone_lossless(scaled_mode, scaled_probe):
    dbs = [0.0, 1.0, 3.0, 6.0, 10.0]
    sweep = squeezing_sweep(scaled_mode, scaled_probe, dbs)
    temps = [t for _, t in sweep]
    assert rel_err(temps[0], minimum_temperature(scaled_mode, scaled_probe)) < 1e-12
    assert all(b < a for a, b in zip(temps, temps[1:]))


def test_squeezing_sweep_saturates_under_loss(paper_mode):
    """At 10% efficiency the detected variance floors at (1-eta)/2."""
    bath = MechanicalMode(paper_mode.omega_m, paper_mode.gamma_m,
                          paper_mode.mass_eff, 2.941936003973493)
    base = ProbeState.from_cooperativity(1.0e3, bath.gamma_m, N_C, KAPPA,
                                         eta_d=0.1)
    sweep = squeezing_sweep(bath, base, [0.0, 5.0, 10.0, 15.0, 40.0])
    temps = [t for _, t in sweep]
    assert all(b <= a for a, b in zip(temps, temps[1:]))
    # the first 5 dB buy more than the 5 dB after 10 dB
    assert temps[0] - temps[1] > temps[2] - temps[3]
    # infinite squeezing limit: V_d -> (1-eta)/2
    t_floor = 2 * bath.t_bath / (math.sqrt(
        1 + 8 * bath.thermal_occupancy() * 1e3 / (0.9 / 2)) + 1)
    assert rel_err(temps[-1], t_floor) < 1e-3
