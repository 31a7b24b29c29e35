"""Spectral estimation, lock-in demodulation and phase-space statistics."""

import math

import numpy as np
import pytest

from sqzcool import MechanicalMode
from sqzcool.dsp import (
    PhaseSpaceTrack,
    Spectrum,
    equipartition_temperature,
    lockin_demodulate,
    marginal_histogram,
    shot_noise_reference,
    welch_psd,
)
from sqzcool.specfit import SquashModel
from conftest import rel_err

FS = 1.0e6


# ------------------------------------------------------------- welch_psd

def test_sine_power():
    """A tone of amplitude a carries band power a^2/2."""
    t = np.arange(1 << 18) / FS
    a, f0 = 3.0e-9, 98.4e3
    x = a * np.cos(2 * math.pi * f0 * t + 0.3)
    spec = welch_psd(x, FS, 1 << 12)
    assert rel_err(spec.band_power(f0 - 5e3, f0 + 5e3), a * a / 2) < 0.01
    peak = spec.freq[np.argmax(spec.psd)]
    assert abs(peak - f0) <= spec.df


def test_white_noise_level_and_parseval():
    rng = np.random.default_rng(0)
    sigma = 2.5e-12
    x = rng.standard_normal(1 << 20) * sigma
    spec = welch_psd(x, FS, 1 << 10)
    # one-sided density of white noise of variance sigma^2 is 2 sigma^2 / fs
    assert rel_err(np.mean(spec.psd[1:-1]), 2 * sigma ** 2 / FS) < 0.01
    # Parseval: integrated PSD returns the variance
    assert rel_err(spec.band_power(), np.var(x)) < 0.01
    # per-bin scatter consistent with the number of averages
    rel_std = np.std(spec.psd[1:-1]) / np.mean(spec.psd[1:-1])
    assert 0.5 / math.sqrt(spec.averages) < rel_std < 2.0 / math.sqrt(spec.averages)


def test_rectangular_window_parseval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(1 << 16)
    spec = welch_psd(x, FS, 1 << 10, window="rectangular", overlap=0.0)
    assert rel_err(spec.band_power(), np.var(x)) < 0.02
    assert spec.resolution_bw == pytest.approx(FS / (1 << 10))


def test_welch_validation():
    x = np.zeros(100)
    with pytest.raises(ValueError, match="segment"):
        welch_psd(x, FS, 1024)
    with pytest.raises(ValueError, match="window"):
        welch_psd(np.zeros(4096), FS, 1024, window="flattop")
    with pytest.raises(ValueError, match="overlap"):
        welch_psd(np.zeros(4096), FS, 1024, overlap=1.0)


def test_spectrum_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    spec = Spectrum(freq=np.linspace(0, 5e5, 257),
                    psd=rng.gamma(10, 1e-30, 257),
                    resolution_bw=1953.125, averages=10, source="in_loop_y")
    path = tmp_path / "spec.csv"
    spec.to_csv(path)
    back = Spectrum.from_csv(path)
    assert np.array_equal(back.freq, spec.freq)
    assert np.array_equal(back.psd, spec.psd)
    assert back.resolution_bw == spec.resolution_bw
    assert back.averages == spec.averages
    assert back.source == "in_loop_y"


# ------------------------------------------------- equipartition readout

def test_equipartition_from_simulation(scaled_mode, traj_off):
    spec = welch_psd(traj_off.x, traj_off.sample_rate, 1 << 14)
    t = equipartition_temperature(spec, scaled_mode)
    # same second moment up to the small Hann/overlap windowing bias
    assert rel_err(t, traj_off.temperature()) < 0.02
    assert rel_err(t, 295.0) < 0.06
    # halving the resolution must not move the answer
    spec2 = welch_psd(traj_off.x, traj_off.sample_rate, 1 << 15)
    assert rel_err(equipartition_temperature(spec2, scaled_mode), t) < 0.01


def test_equipartition_synthetic_lorentzian(scaled_mode):
    model = SquashModel(omega_m=scaled_mode.omega_m, gamma_m=scaled_mode.gamma_m,
                        gain=0.0, s_imp=1e-40, drive=1.0e-3)
    freq = np.linspace(0, 20e6, 2_000_001)
    spec = Spectrum(freq=freq, psd=model.true_psd(freq),
                    resolution_bw=freq[1], averages=1, source="true_x")
    t = equipartition_temperature(spec, scaled_mode)
    from scipy.constants import k as k_B
    t_true = scaled_mode.mass_eff * scaled_mode.omega_m ** 2 \
        * model.position_variance() / k_B
    assert rel_err(t, t_true) < 0.01


def test_equipartition_refuses_in_loop(scaled_mode, traj_off):
    spec = welch_psd(traj_off.y, traj_off.sample_rate, 1 << 14,
                     source="in_loop_y")
    with pytest.raises(ValueError, match="squashing"):
        equipartition_temperature(spec, scaled_mode)
    # explicit override works (valid here: no feedback, so no bias beyond
    # the imprecision floor)
    t = equipartition_temperature(spec, scaled_mode, allow_in_loop=True)
    assert t > 0


def test_equipartition_narrow_band_rejected(scaled_mode, traj_off):
    spec = welch_psd(traj_off.x, traj_off.sample_rate, 1 << 14)
    with pytest.raises(ValueError, match="99%"):
        equipartition_temperature(spec, scaled_mode, band=(99e3, 101e3))


# ---------------------------------------------------------------- lock-in

def test_lockin_tone_phase():
    f_ref, bw = 100e3, 5e3
    t = np.arange(1 << 18) / FS
    a, phi = 2.0, 0.7
    y = a * np.cos(2 * math.pi * f_ref * t + phi)
    track = lockin_demodulate(y, FS, f_ref, bw)
    settle = int(8 / bw * FS)
    assert rel_err(np.mean(track.X[settle:]), a * math.cos(phi)) < 0.01
    assert rel_err(np.mean(track.Y[settle:]), a * math.sin(phi)) < 0.01


def test_lockin_harmonic_rejection():
    f_ref, bw = 100e3, 5e3
    t = np.arange(1 << 18) / FS
    y = np.cos(2 * math.pi * 2 * f_ref * t)
    track = lockin_demodulate(y, FS, f_ref, bw)
    settle = int(8 / bw * FS)
    r = np.hypot(track.X[settle:], track.Y[settle:])
    assert np.max(r) < 1e-2  # > 40 dB rejection of the second harmonic


def test_lockin_validation():
    y = np.zeros(1000)
    with pytest.raises(ValueError, match="lpf"):
        lockin_demodulate(y, FS, 1e4, 2e4)
    with pytest.raises(ValueError, match="positive"):
        lockin_demodulate(y, FS, 1e4, 0.0)
    with pytest.raises(ValueError, match="shot_noise_scale"):
        lockin_demodulate(y, FS, 1e4, 1e3, shot_noise_scale=0.0)


def test_lockin_thermal_quadratures(scaled_mode, traj_off):
    """Undriven thermal motion has symmetric quadratures that carry <x^2>."""
    bw = 10e3
    track = lockin_demodulate(traj_off.x, traj_off.sample_rate,
                              scaled_mode.frequency_hz, bw)
    settle = int(8 / bw * traj_off.sample_rate)
    vx = float(np.var(track.X[settle:]))
    vy = float(np.var(track.Y[settle:]))
    assert rel_err(vx, vy) < 0.1
    # x = X cos - Y sin, so Var x = (Var X + Var Y) / 2 when the envelope
    # passes the low-pass intact
    assert rel_err(0.5 * (vx + vy), traj_off.position_variance()) < 0.1


def test_shot_noise_reference_scaling():
    s1 = shot_noise_reference(1e-30, FS, 100e3, 5e3, duration=0.5)
    s2 = shot_noise_reference(4e-30, FS, 100e3, 5e3, duration=0.5)
    assert rel_err(s2 / s1, 2.0) < 1e-9  # same seed, pure amplitude scaling
    with pytest.raises(ValueError):
        shot_noise_reference(0.0, FS, 100e3, 5e3)


def test_track_csv_round_trip(tmp_path):
    t = np.arange(5) / FS
    track = PhaseSpaceTrack(t=t, x_quad=np.sin(t), y_quad=np.cos(t),
                            lpf_bandwidth=5e3, f_ref=1e5)
    path = tmp_path / "track.csv"
    track.to_csv(path)
    text = path.read_text()
    assert "# f_ref_hz=100000" in text
    assert "t_s,x_quadrature,y_quadrature" in text
    vx, vy = track.quadrature_variances()
    assert vx == np.var(track.X) and vy == np.var(track.Y)


# -------------------------------------------------------------- histogram

def test_marginal_histogram_gaussian():
    rng = np.random.default_rng(3)
    n = 200_000
    x = rng.standard_normal(n) * 1.7 + 0.4
    track = PhaseSpaceTrack(t=np.arange(n) / FS, x_quad=x, y_quad=np.zeros(n),
                            lpf_bandwidth=5e3, f_ref=1e5)
    hist = marginal_histogram(track, axis="X", bins=80)
    assert abs(hist.mean - 0.4) < 0.02
    assert rel_err(hist.variance, 1.7 ** 2) < 0.03
    assert abs(np.sum(hist.density) * hist.bin_width - 1.0) < 1e-6
    # moment-fit Gaussian tracks the binned density
    resid = hist.density - hist.gaussian()
    assert np.max(np.abs(resid)) < 0.05 * np.max(hist.density)


def test_marginal_histogram_errors():
    n = 100
    track = PhaseSpaceTrack(t=np.arange(n) / FS, x_quad=np.zeros(n),
                            y_quad=np.ones(n), lpf_bandwidth=5e3, f_ref=1e5)
    with pytest.raises(ValueError, match="zero variance"):
        marginal_histogram(track, axis="X")
    with pytest.raises(ValueError, match="axis"):
        marginal_histogram(track, axis="Z")
