"""Spectral and lock-in analysis of recorded trajectories.

Converts time series into the observables used throughout the package:
averaged power spectra, lock-in (IQ) phase-space tracks, marginal histograms
and equipartition temperatures.

Conventions, fixed here and nowhere else: every PSD crossing a public
interface is one-sided and in Hz (m^2/Hz for displacement).  The closed-loop
spectral models in :mod:`sqzcool.specfit` are written double-sided in angular
frequency; the single conversion factor between the two worlds is

    S_one_sided(f) = 2 * S_double_sided(omega = 2 pi f)

(the 2 pi from d omega = 2 pi df cancels against the delta-function
normalisation of the noise constants, which are quoted per Hz).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.constants import k as k_B

from .model import MechanicalMode

SPECTRUM_SOURCES = ("in_loop_y", "true_x")
WINDOWS = ("hann", "rectangular")


@dataclass
class Spectrum:
    """One-sided averaged power spectral density on a uniform frequency grid.

    ``source`` records whether the analysed series was the in-loop detector
    record ("in_loop_y", biased by noise squashing) or the true displacement
    ("true_x").  ``resolution_bw`` is the equivalent noise bandwidth of one
    bin in Hz and ``averages`` the number of averaged segments.
    """

    freq: np.ndarray
    psd: np.ndarray
    resolution_bw: float
    averages: int
    source: str

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freq.shape != self.psd.shape or self.freq.ndim != 1:
            raise ValueError("freq and psd must be 1-d arrays of equal length")
        if np.any(self.psd < 0):
            raise ValueError("psd must be non-negative")
        if self.source not in SPECTRUM_SOURCES:
            raise ValueError(f"source must be one of {SPECTRUM_SOURCES}")
        if self.averages < 1:
            raise ValueError("averages must be at least 1")

    @property
    def df(self) -> float:
        return float(self.freq[1] - self.freq[0])

    def band_power(self, f_lo: float | None = None, f_hi: float | None = None) -> float:
        """Integrated PSD (variance contribution, m^2) over [f_lo, f_hi]."""
        sel = np.ones(len(self.freq), dtype=bool)
        if f_lo is not None:
            sel &= self.freq >= f_lo
        if f_hi is not None:
            sel &= self.freq <= f_hi
        return float(np.sum(self.psd[sel]) * self.df)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# source={self.source}\n")
            fh.write(f"# resolution_bw_hz={self.resolution_bw:.17g}\n")
            fh.write(f"# averages={self.averages}\n")
            fh.write("freq_hz,psd_m2_per_hz\n")
            for f, p in zip(self.freq, self.psd):
                fh.write(f"{f:.17g},{p:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "Spectrum":
        meta = {}
        freq, psd = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    meta[key.strip()] = val.strip()
                elif line[0].isdigit() or line[0] in "+-.":
                    f, p = line.split(",")
                    freq.append(float(f))
                    psd.append(float(p))
        return cls(np.array(freq), np.array(psd),
                   resolution_bw=float(meta["resolution_bw_hz"]),
                   averages=int(meta["averages"]),
                   source=meta["source"])


@dataclass
class PhaseSpaceTrack:
    """Demodulated quadrature trajectory (X, Y) of a narrowband signal.

    X and Y carry the units of the input series unless a shot-noise scale
    was applied, in which case they are dimensionless.  The low-pass
    bandwidth must resolve the mechanical envelope (wider than the
    linewidth) while rejecting the carrier (well below the resonance
    frequency).
    """

    t: np.ndarray
    x_quad: np.ndarray
    y_quad: np.ndarray
    lpf_bandwidth: float
    f_ref: float

    def __post_init__(self):
        if not (len(self.t) == len(self.x_quad) == len(self.y_quad)):
            raise ValueError("track arrays must have equal length")

    # keep the paper-facing names usable too
    @property
    def X(self) -> np.ndarray:  # noqa: N802
        return self.x_quad

    @property
    def Y(self) -> np.ndarray:  # noqa: N802
        return self.y_quad

    def quadrature_variances(self) -> tuple[float, float]:
        return float(np.var(self.x_quad)), float(np.var(self.y_quad))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# f_ref_hz={self.f_ref:.17g}\n")
            fh.write(f"# lpf_bandwidth_hz={self.lpf_bandwidth:.17g}\n")
            fh.write("t_s,x_quadrature,y_quadrature\n")
            for row in zip(self.t, self.x_quad, self.y_quad):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def welch_psd(series, sample_rate: float, segment_length: int,
              window: str = "hann", overlap: float = 0.5,
              source: str = "true_x") -> Spectrum:
    """Averaged one-sided periodogram of a uniformly sampled series.

    ``overlap`` is the fractional segment overlap.  The result satisfies
    Parseval's identity: sum(psd) * df equals the series variance (up to the
    usual small windowing bias at 50% overlap).
    """
    series = np.asarray(series, dtype=float)
    if window not in WINDOWS:
        raise ValueError(f"window must be one of {WINDOWS}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    if segment_length > len(series):
        raise ValueError("series shorter than one segment")

    win = "hann" if window == "hann" else "boxcar"
    noverlap = int(round(segment_length * overlap))
    freq, psd = signal.welch(series, fs=sample_rate, window=win,
                             nperseg=segment_length, noverlap=noverlap,
                             detrend="constant", scaling="density",
                             return_onesided=True)
    n_avg = 1 + (len(series) - segment_length) // (segment_length - noverlap) \
        if segment_length < len(series) else 1

    w = signal.get_window(win, segment_length)
    enbw = sample_rate * np.sum(w ** 2) / np.sum(w) ** 2
    return Spectrum(freq=freq, psd=psd, resolution_bw=float(enbw),
                    averages=int(n_avg), source=source)


def equipartition_temperature(spectrum: Spectrum, mode: MechanicalMode,
                              band: tuple[float, float] | None = None,
                              allow_in_loop: bool = False) -> float:
    """Mode temperature m Omega_m^2 * (integrated displacement PSD) / k_B.

    Refuses in-loop spectra unless ``allow_in_loop`` is set: the detector
    record is biased by noise squashing, so its integral does not measure the
    oscillator energy.  Use the squashing-aware fit for those.

    ``band`` (Hz) restricts the integration; it must cover at least 99% of
    the Lorentzian line weight for the given mode linewidth.
    """
    if spectrum.source == "in_loop_y" and not allow_in_loop:
        raise ValueError("in-loop spectra are biased by noise squashing; "
                         "fit first or pass allow_in_loop=True")
    if band is None:
        f_lo, f_hi = float(spectrum.freq[0]), float(spectrum.freq[-1])
    else:
        f_lo, f_hi = band
    # fraction of a Lorentzian of FWHM gamma_m centred on the resonance
    w0, hw = mode.omega_m, mode.gamma_m / 2
    lo = math.atan((2 * math.pi * f_lo - w0) / hw)
    hi = math.atan((2 * math.pi * f_hi - w0) / hw)
    if (hi - lo) / math.pi < 0.99:
        raise ValueError("band covers less than 99% of the line weight")
    var = spectrum.band_power(f_lo, f_hi)
    return mode.mass_eff * mode.omega_m ** 2 * var / k_B


def _cascaded_lowpass(x: np.ndarray, cutoff_hz: float, sample_rate: float,
                      stages: int = 4) -> np.ndarray:
    """Cascade of identical one-pole low-pass sections, -3 dB at cutoff_hz."""
    # per-stage corner so the n-stage cascade is -3 dB at the requested cutoff
    f1 = cutoff_hz / math.sqrt(2 ** (1 / stages) - 1)
    a = 1.0 - math.exp(-2 * math.pi * f1 / sample_rate)
    out = x
    for _ in range(stages):
        out = signal.lfilter([a], [1.0, -(1.0 - a)], out)
    return out


def lockin_demodulate(y, sample_rate: float, f_ref: float,
                      lpf_bandwidth: float,
                      shot_noise_scale: float | None = None) -> PhaseSpaceTrack:
    """IQ demodulation of a record at a reference frequency.

    Mixes the series with two in-quadrature references and low-pass filters,
    so a steady tone a*cos(2 pi f_ref t + phi) maps to (X, Y) =
    (a cos phi, a sin phi).  The low-pass is a 4th-order cascade of one-pole
    sections with overall -3 dB bandwidth ``lpf_bandwidth``.

    If ``shot_noise_scale`` is given (see :func:`shot_noise_reference`), both
    quadratures are divided by it, giving axes normalised to the coherent
    imprecision level.
    """
    y = np.asarray(y, dtype=float)
    if lpf_bandwidth >= f_ref:
        raise ValueError("lpf_bandwidth must be below the reference frequency")
    if lpf_bandwidth <= 0:
        raise ValueError("lpf_bandwidth must be positive")
    t = np.arange(len(y)) / sample_rate
    ph = 2 * math.pi * f_ref * t
    x_q = 2.0 * _cascaded_lowpass(y * np.cos(ph), lpf_bandwidth, sample_rate)
    y_q = -2.0 * _cascaded_lowpass(y * np.sin(ph), lpf_bandwidth, sample_rate)
    if shot_noise_scale is not None:
        if shot_noise_scale <= 0:
            raise ValueError("shot_noise_scale must be positive")
        x_q = x_q / shot_noise_scale
        y_q = y_q / shot_noise_scale
    return PhaseSpaceTrack(t=t, x_quad=x_q, y_quad=y_q,
                           lpf_bandwidth=lpf_bandwidth, f_ref=f_ref)


def shot_noise_reference(noise_floor: float, sample_rate: float, f_ref: float,
                         lpf_bandwidth: float, duration: float = 1.0,
                         seed: int = 0) -> float:
    """Operational shot-noise scale for phase-space axes.

    Feeds pure white imprecision noise with the given double-sided floor
    (m^2/Hz, the coherent-probe value from
    :func:`sqzcool.simulate.imprecision_floor`) through the same lock-in and
    returns the RMS of one quadrature.  Dividing a track's quadratures by
    this number expresses them in units of the coherent imprecision level.
    This is an operational definition; no closed form is assumed for the
    filter's noise bandwidth.
    """
    if noise_floor <= 0:
        raise ValueError("noise_floor must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    noise = rng.standard_normal(n) * math.sqrt(noise_floor * sample_rate)
    track = lockin_demodulate(noise, sample_rate, f_ref, lpf_bandwidth)
    settle = int(round(4.0 / lpf_bandwidth * sample_rate))
    vx = np.var(track.x_quad[settle:])
    vy = np.var(track.y_quad[settle:])
    return float(math.sqrt(0.5 * (vx + vy)))


@dataclass
class MarginalHistogram:
    """Binned probability density of one quadrature with a Gaussian moment fit."""

    centers: np.ndarray
    density: np.ndarray
    mean: float
    variance: float

    @property
    def bin_width(self) -> float:
        return float(self.centers[1] - self.centers[0])

    def gaussian(self) -> np.ndarray:
        """Moment-fit Gaussian evaluated on the bin centers."""
        return np.exp(-(self.centers - self.mean) ** 2 / (2 * self.variance)) \
            / math.sqrt(2 * math.pi * self.variance)


def marginal_histogram(track: PhaseSpaceTrack, axis: str = "X",
                       bins: int = 60) -> MarginalHistogram:
    """Unit-normalised marginal distribution of a quadrature track.

    The Gaussian fit is by moments (sample mean and variance), which is the
    maximum-likelihood fit for Gaussian data and avoids binning bias.
    """
    if axis not in ("X", "Y"):
        raise ValueError("axis must be 'X' or 'Y'")
    data = track.x_quad if axis == "X" else track.y_quad
    var = float(np.var(data))
    if var == 0:
        raise ValueError("degenerate input: quadrature has zero variance")
    density, edges = np.histogram(data, bins=bins, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return MarginalHistogram(centers=centers, density=density,
                             mean=float(np.mean(data)), variance=var)
