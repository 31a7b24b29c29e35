"""Squashing-aware fitting of closed-loop displacement spectra.

The detector record inside a viscous feedback loop is y = x + n with the fed
back noise n correlated with x, so its spectrum is not Lorentzian-plus-floor:
at high gain it dips below the imprecision floor at resonance (noise
squashing).  Fitting the in-loop spectrum with the correct closed-loop model
recovers the resonance frequency, the effective viscous gain and the noise
floor, from which the unbiased mode temperature follows.

Internally the models are double-sided in angular frequency; everything
crossing the interface is one-sided in Hz (see :mod:`sqzcool.dsp` for the
factor of 2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.constants import k as k_B

from .dsp import Spectrum
from .model import MechanicalMode, ProbeState
from .simulate import imprecision_floor, thermal_force_psd

DEFAULT_MAX_ITER = 200
STEP_TOL = 1e-10       # absolute parameter step (scaled units)
REL_TOL = 1e-8         # relative cost improvement


@dataclass(frozen=True)
class SquashModel:
    """Closed-loop spectral model of a viscously damped oscillator.

    omega_m, gamma_m in rad/s; gain is the dimensionless viscous gain G;
    s_imp is the double-sided displacement noise floor of the record in
    m^2/Hz; drive is the double-sided thermal force PSD divided by the mass
    squared (m^2 s^-3), fixed by the bath temperature.

    With N(w) = (Om^2 - w^2)^2 + Gm^2 w^2 and
    D(w) = (Om^2 - w^2)^2 + Gm^2 (1+G)^2 w^2, the double-sided spectra are

        record (in-loop):    S_y(w) = (drive + s_imp N(w)) / D(w)
        true displacement:   S_x(w) = (drive + (Gm G w)^2 s_imp) / D(w)

    Both reduce to a Lorentzian plus flat floor at G = 0; at resonance and
    large gain S_y drops below s_imp (squashing) while S_x does not.
    """

    omega_m: float
    gamma_m: float
    gain: float
    s_imp: float
    drive: float

    def __post_init__(self):
        if self.omega_m <= 0 or self.gamma_m <= 0:
            raise ValueError("omega_m and gamma_m must be positive")
        if self.gain < 0:
            raise ValueError("gain must be non-negative")
        if self.s_imp <= 0 or self.drive < 0:
            raise ValueError("s_imp must be positive and drive non-negative")

    @classmethod
    def from_physical(cls, mode: MechanicalMode, probe: ProbeState,
                      gain: float) -> "SquashModel":
        """Model parameters implied by a mechanical mode and probe."""
        return cls(omega_m=mode.omega_m, gamma_m=mode.gamma_m, gain=gain,
                   s_imp=imprecision_floor(mode, probe),
                   drive=thermal_force_psd(mode) / mode.mass_eff ** 2)

    @property
    def noise_ratio(self) -> float:
        """Thermal-to-noise ratio A = drive / (gamma_m^2 omega_m^2 s_imp).

        The closed-loop temperature is T0 (1 + G^2/A) / (1 + G); A also
        fixes the optimal gain sqrt(1 + A) - 1.
        """
        return self.drive / (self.gamma_m ** 2 * self.omega_m ** 2 * self.s_imp)

    def _nd(self, w):
        d2 = (self.omega_m ** 2 - w ** 2) ** 2
        n = d2 + (self.gamma_m * w) ** 2
        d = d2 + (self.gamma_m * (1 + self.gain) * w) ** 2
        return n, d

    def in_loop_psd(self, freq_hz) -> np.ndarray:
        """One-sided PSD of the detector record, m^2/Hz."""
        w = 2 * math.pi * np.asarray(freq_hz, dtype=float)
        n, d = self._nd(w)
        return 2 * (self.drive + self.s_imp * n) / d

    def true_psd(self, freq_hz) -> np.ndarray:
        """One-sided PSD of the true displacement, m^2/Hz."""
        w = 2 * math.pi * np.asarray(freq_hz, dtype=float)
        _, d = self._nd(w)
        return 2 * (self.drive + (self.gamma_m * self.gain * w) ** 2 * self.s_imp) / d

    def position_variance(self) -> float:
        """Analytic variance of the true displacement, m^2.

        Closed form of the full-band integral of the S_x model:
        drive/(2 Gm (1+G) Om^2) + Gm G^2 s_imp / (2 (1+G)).
        """
        g_t = self.gamma_m * (1 + self.gain)
        return (self.drive / (2 * g_t * self.omega_m ** 2)
                + self.gamma_m ** 2 * self.gain ** 2 * self.s_imp / (2 * g_t))


@dataclass
class FitResult:
    """Outcome of a spectral fit.

    param_errors are 1-sigma estimates from the curvature of the weighted
    least-squares objective at the optimum; t_eff is the unbiased mode
    temperature implied by the fitted model (NaN when no mass was supplied).
    """

    params: SquashModel
    param_errors: dict[str, float]
    t_eff: float
    converged: bool
    residual_norm: float
    iterations: int
    message: str = ""

    def to_record(self) -> str:
        """Flat key=value text block, one entry per line."""
        p = self.params
        lines = {
            "omega_m_rad_s": p.omega_m, "gamma_m_rad_s": p.gamma_m,
            "gain": p.gain, "s_imp_m2_per_hz": p.s_imp,
            "drive_m2_s3": p.drive,
            "err_omega_m_rad_s": self.param_errors.get("omega_m", float("nan")),
            "err_gain": self.param_errors.get("gain", float("nan")),
            "err_s_imp_m2_per_hz": self.param_errors.get("s_imp", float("nan")),
            "t_eff_k": self.t_eff, "converged": self.converged,
            "residual_norm": self.residual_norm, "iterations": self.iterations,
        }
        return "".join(f"{k}={v}\n" for k, v in lines.items())


def initial_guess(spec: Spectrum, gamma_m: float, drive: float) -> SquashModel:
    """Starting point for the fit from gross spectrum features.

    The noise floor comes from the median of the outer 20% of bins; the
    resonance from the most prominent extremum (peak at low gain, squashing
    dip at high gain); the gain from the extremum-to-floor ratio through the
    on-resonance model value.
    """
    psd = spec.psd
    n = len(psd)
    k = max(n // 10, 1)
    floor = float(np.median(np.concatenate([psd[:k], psd[-k:]])))
    if floor <= 0:
        floor = float(np.median(psd[psd > 0]))
    s0 = floor / 2.0  # one-sided floor is 2 s_imp

    # locate the extremum on a smoothed copy so single noisy bins of a
    # near-flat (strongly squashed) record cannot masquerade as the line
    df = float(spec.freq[1] - spec.freq[0]) if n > 1 else 1.0
    width = int(round(gamma_m / (2 * math.pi) / 4 / df))
    # at least 3 bins: a single low bin of a noisy flat floor must not be
    # able to outrank the real line as a squashing dip
    width = max(width, 3) | 1  # odd
    if width > 1:
        padded = np.pad(psd, width // 2, mode="reflect")
        psd = np.convolve(padded, np.ones(width) / width, mode="valid")

    i_pk = int(np.argmax(psd))
    i_dip = int(np.argmin(psd))
    peak_ratio = psd[i_pk] / floor
    dip_ratio = floor / max(psd[i_dip], 1e-300)
    i_ext = i_pk if peak_ratio >= dip_ratio else i_dip
    om0 = 2 * math.pi * float(spec.freq[i_ext])
    if om0 <= 0:
        om0 = 2 * math.pi * float(spec.freq[n // 2])

    # the on-resonance record-to-floor ratio is (1 + A)/(1 + G)^2 with A
    # known from the floor guess, so the gain follows directly
    a = drive / (gamma_m ** 2 * om0 ** 2 * s0)
    r = max(float(psd[i_ext]) / floor, 1e-12)
    g0 = max(math.sqrt((1 + a) / r) - 1.0, 0.0)
    return SquashModel(omega_m=om0, gamma_m=gamma_m, gain=g0,
                       s_imp=s0, drive=drive)


def _model_and_jacobian(m: SquashModel, w: np.ndarray, float_gamma: bool):
    """One-sided in-loop model and its Jacobian wrt the free parameters."""
    om, gm, g, s = m.omega_m, m.gamma_m, m.gain, m.s_imp
    det = om ** 2 - w ** 2
    d2 = det ** 2
    n = d2 + (gm * w) ** 2
    d = d2 + (gm * (1 + g) * w) ** 2
    num = m.drive + s * n
    val = 2 * num / d

    d_om = 8 * om * det * (s * d - num) / d ** 2
    d_g = -2 * num * (2 * gm ** 2 * (1 + g) * w ** 2) / d ** 2
    d_s = 2 * n / d
    cols = [d_om, d_g, d_s]
    if float_gamma:
        d_gm = 2 * (s * 2 * gm * w ** 2 * d
                    - num * 2 * gm * (1 + g) ** 2 * w ** 2) / d ** 2
        cols.append(d_gm)
    return val, np.column_stack(cols)


def fit_spectrum(spec: Spectrum, init: SquashModel,
                 bounds: dict[str, tuple[float, float]] | None = None,
                 float_gamma: bool = False,
                 fit_band_linewidths: float = 10.0,
                 mass_eff: float | None = None,
                 max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """Weighted least-squares fit of the in-loop squashing model.

    Free parameters are {omega_m, gain, s_imp}; gamma_m and drive are taken
    from ``init`` (a feedback-off calibration fixes the linewidth, the bath
    temperature fixes the drive).  Set ``float_gamma`` to also fit the
    linewidth for diagnostics.

    Bins are weighted by the averaged-periodogram standard deviation
    value/sqrt(averages); the weights are re-derived from the fitted model
    after the first pass (two reweighting rounds), since weights taken from
    the noisy bins themselves systematically pull the fit low.  The optimiser
    is a damped Gauss-Newton iteration with an analytic Jacobian; the fit
    band is restricted to
    ``fit_band_linewidths`` closed-loop linewidths (the damping-broadened
    width gamma_m (1 + G)) around the initial resonance, where the viscous
    approximation of the loop filter holds.

    ``mass_eff`` (kg), if given, fills the result's unbiased effective
    temperature.
    """
    if np.any(spec.psd < 0):
        raise ValueError("spectrum has negative bins")
    hw = fit_band_linewidths * (1 + init.gain) * init.gamma_m / (2 * math.pi)
    f0 = init.omega_m / (2 * math.pi)
    sel = (spec.freq >= f0 - hw) & (spec.freq <= f0 + hw) & (spec.freq > 0)
    if np.count_nonzero(sel) < (5 if not float_gamma else 6):
        raise ValueError("fit band holds too few bins; spectrum must cover "
                         "several linewidths around the initial resonance")
    freq = spec.freq[sel]
    data = spec.psd[sel]
    w = 2 * math.pi * freq

    names = ["omega_m", "gain", "s_imp"] + (["gamma_m"] if float_gamma else [])
    default_bounds = {
        "omega_m": (w[0], w[-1]),
        "gain": (0.0, math.inf),
        "s_imp": (init.s_imp * 1e-6, init.s_imp * 1e6),
        "gamma_m": (init.gamma_m * 1e-3, init.gamma_m * 1e3),
    }
    if bounds:
        default_bounds.update(bounds)
    lo = np.array([default_bounds[k][0] for k in names])
    hi = np.array([default_bounds[k][1] for k in names])

    def pack(m):
        p = [m.omega_m, m.gain, m.s_imp]
        if float_gamma:
            p.append(m.gamma_m)
        return np.array(p)

    def unpack(p):
        kw = dict(omega_m=p[0], gain=p[1], s_imp=p[2])
        if float_gamma:
            kw["gamma_m"] = p[3]
        return replace(init, **kw)

    p = np.clip(pack(init), lo, hi)
    scale = np.where(np.abs(p) > 0, np.abs(p), 1.0)

    def gauss_newton(p, wt):
        model = unpack(p)
        val, jac = _model_and_jacobian(model, w, float_gamma)
        res = (data - val) * wt
        cost = float(res @ res)
        lam = 1e-3
        converged = False
        message = "max iterations reached"
        it = 0
        for it in range(1, max_iter + 1):
            jw = jac * wt[:, None] * scale[None, :]
            h = jw.T @ jw
            grad = jw.T @ res
            try:
                step = np.linalg.solve(h + lam * np.diag(np.diag(h))
                                       + 1e-300 * np.eye(len(p)), grad)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = np.clip(p + step * scale, lo, hi)
            model_new = unpack(p_new)
            val_new, jac_new = _model_and_jacobian(model_new, w, float_gamma)
            res_new = (data - val_new) * wt
            cost_new = float(res_new @ res_new)
            if cost_new <= cost:
                rel_dp = np.max(np.abs(p_new - p) / scale)
                rel_dc = (cost - cost_new) / max(cost, 1e-300)
                p, model, val, jac, res, cost = \
                    p_new, model_new, val_new, jac_new, res_new, cost_new
                lam = max(lam / 3, 1e-12)
                if rel_dp < STEP_TOL or rel_dc < REL_TOL:
                    converged = True
                    message = "converged"
                    break
            else:
                lam *= 10
                if lam > 1e12:
                    message = "damping exhausted without improvement"
                    break
        return p, model, val, jac, cost, converged, it, message

    # first pass with data-derived weights, then re-derive the weights from
    # the fitted model and repeat: data weights alone bias the fit low
    wt = math.sqrt(spec.averages) / np.maximum(data, np.max(data) * 1e-12)
    it_total = 0
    for _ in range(3):
        p, model, val, jac, cost, converged, it, message = gauss_newton(p, wt)
        it_total += it
        wt = math.sqrt(spec.averages) / np.maximum(val, np.max(val) * 1e-12)
    it = it_total

    # 1-sigma errors from the curvature at the optimum; weights are absolute
    # standard deviations, so no reduced-chi-square rescaling
    jw = jac * wt[:, None]
    errors = {}
    try:
        cov = np.linalg.inv(jw.T @ jw)
        for i, name in enumerate(names):
            errors[name] = float(math.sqrt(max(cov[i, i], 0.0)))
    except np.linalg.LinAlgError:
        for name in names:
            errors[name] = float("nan")

    t_eff = float("nan")
    if mass_eff is not None:
        t_eff = mass_eff * model.omega_m ** 2 * model.position_variance() / k_B
    return FitResult(params=model, param_errors=errors, t_eff=t_eff,
                     converged=converged, residual_norm=math.sqrt(cost),
                     iterations=it, message=message)


def effective_temperature(fit: FitResult, mode: MechanicalMode,
                          probe: ProbeState | None = None) -> float:
    """Unbiased mode temperature from a converged in-loop fit.

    Evaluated two ways and cross-checked within 1%: the closed form
    T0 (1 + G^2/A)/(1 + G) with A from the fitted floor, and the numeric
    full-band integral of the fitted true-displacement model.  ``probe`` is
    accepted for interface symmetry; the fitted floor already encodes it.
    """
    if not fit.converged:
        raise ValueError("fit did not converge; refusing temperature estimate")
    m = fit.params
    mass = mode.mass_eff

    a = m.noise_ratio
    t0 = mass * m.drive / (2 * k_B * m.gamma_m)
    t_closed = t0 * (1 + m.gain ** 2 / a) / (1 + m.gain)

    # numeric integral of the S_x model (one-sided, Hz)
    f_max = 200 * m.omega_m / (2 * math.pi)
    freq = np.linspace(0, f_max, 400001)
    var_num = np.trapezoid(m.true_psd(freq), freq)
    # the truncated tail falls off as 1/f^2; extend analytically
    tail = m.true_psd(np.array([f_max]))[0] * f_max
    t_num = mass * m.omega_m ** 2 * (var_num + tail) / k_B

    if abs(t_num / t_closed - 1) > 0.01:
        raise AssertionError("internal inconsistency: numeric model integral "
                             "and closed-form temperature disagree by > 1%")
    return t_closed


@dataclass
class GainCalibration:
    """Linear map from electronic gain K to effective viscous gain G."""

    slope: float
    nonlinearity: float
    monotone: bool

    def __call__(self, k: float) -> float:
        return self.slope * k


def gain_calibration(sweep: list[tuple[float, FitResult]]) -> GainCalibration:
    """Through-origin least-squares map K -> G from a fitted gain sweep.

    ``sweep`` holds (electronic gain, FitResult) pairs and must include
    K = 0 plus at least two more points.  The nonlinearity is the largest
    relative deviation of a fitted G from the linear map.  A non-monotone
    fitted sequence sets ``monotone = False`` and raises a warning.
    """
    if len(sweep) < 3:
        raise ValueError("need at least 3 sweep points")
    ks = np.array([k for k, _ in sweep], dtype=float)
    gs = np.array([fr.params.gain for _, fr in sweep])
    if not np.any(ks == 0):
        raise ValueError("sweep must include the K = 0 point")
    order = np.argsort(ks)
    ks, gs = ks[order], gs[order]
    monotone = bool(np.all(np.diff(gs) >= 0))
    if not monotone:
        warnings.warn("fitted gain is not monotone in electronic gain",
                      stacklevel=2)
    denom = float(ks @ ks)
    slope = float(ks @ gs) / denom if denom > 0 else 0.0
    nz = ks != 0
    nonlin = float(np.max(np.abs(gs[nz] - slope * ks[nz])
                          / np.maximum(np.abs(slope * ks[nz]), 1e-300))) \
        if slope != 0 else float("inf")
    return GainCalibration(slope=slope, nonlinearity=nonlin, monotone=monotone)


def synthesize_spectrum(model: SquashModel, freq_hz, averages: int,
                        seed: int = 0, source: str = "in_loop_y") -> Spectrum:
    """Synthetic averaged periodogram of the model with realistic bin noise.

    Averaged periodogram bins of a Gaussian process follow a gamma
    distribution with shape = averages and mean equal to the true PSD.
    """
    freq_hz = np.asarray(freq_hz, dtype=float)
    if averages < 1:
        raise ValueError("averages must be at least 1")
    truth = model.in_loop_psd(freq_hz) if source == "in_loop_y" \
        else model.true_psd(freq_hz)
    rng = np.random.default_rng(seed)
    psd = rng.gamma(shape=averages, scale=truth / averages)
    return Spectrum(freq=freq_hz, psd=psd,
                    resolution_bw=float(freq_hz[1] - freq_hz[0]),
                    averages=averages, source=source)
