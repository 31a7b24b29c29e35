"""Time-domain Monte Carlo of in-loop feedback cooling.

The plant is a thermally driven harmonic oscillator

    m x'' + m Gamma_m x' + m Omega_m^2 x = F_th(t) + F_fb(t)

integrated with an exact one-step Gaussian update over each sample period
(matrix-exponential mean propagation plus the exact process-noise covariance),
with the feedback force held constant across the step.  A forward
Euler-Maruyama integrator is kept as a cross-check.

The measurement record is y_k = x_k + n_k with white Gaussian imprecision
noise whose level is set by the probe's detected variance.  Conventions for
the noise normalisation live in :func:`imprecision_psd` and
:func:`imprecision_floor`; they are chosen so the simulated cooling curve
reproduces the closed-form predictions in :mod:`sqzcool.model`.

Two feedback models are provided:

* ``ideal_viscous`` -- a velocity estimate (central difference of y, optional
  bandpass) combined with a quadrature correction whose two coefficients are
  solved by exact discrete-time pole placement: the closed loop's dominant
  pole pair is placed at the ideal cold-damped location
  exp((-Gamma_m (1+G)/2 +/- i Omega_d) dt), so the realised damping rate is
  Gamma_m (1+G) exactly at any sample rate.  By default no bandpass is
  applied: the closed-form cooling predictions assume the measurement noise
  is fed back over the full band, and band-limiting the velocity estimate
  measurably reduces the noise heating below them.
* ``realistic_chain`` -- bandpass biquad, sample-quantised delay and gain,
  as in a real electronic loop; its effective viscous gain is meant to be
  re-extracted by spectral fitting, never assumed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import k as k_B
from scipy.linalg import expm, cholesky

from .model import MechanicalMode, ProbeState, cooperativity, detected_variance
from . import _kernels

FEEDBACK_MODES = ("off", "ideal_viscous", "realistic_chain")
INTEGRATORS = ("exact", "euler")

# |x| beyond this many thermal rms values aborts the run
INSTABILITY_RMS_FACTOR = 1e6


class LoopUnstableError(RuntimeError):
    """Raised when the simulated displacement diverges (anti-damping or excess gain)."""


@dataclass(frozen=True)
class FeedbackConfig:
    """Feedback-loop description.

    ``gain`` is the dimensionless viscous gain G for ``ideal_viscous`` and the
    electronic gain K (N per m/s-equivalent) for ``realistic_chain``.
    ``bandpass_bandwidth`` defaults to 0 (no bandpass, bare central-difference
    velocity estimate) for ``ideal_viscous`` and to 50 mechanical linewidths
    for ``realistic_chain``, which always filters.  Frequencies in Hz, delay
    in seconds; the delay is quantised to the sample grid at run time.
    """

    mode: str = "off"
    gain: float = 0.0
    bandpass_center: float | None = None
    bandpass_bandwidth: float | None = None
    delay: float = 0.0
    sign: int = -1

    def __post_init__(self):
        if self.mode not in FEEDBACK_MODES:
            raise ValueError(f"feedback mode must be one of {FEEDBACK_MODES}")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        if (self.bandpass_center is not None and self.bandpass_bandwidth is not None
                and self.bandpass_bandwidth >= self.bandpass_center
                and self.bandpass_bandwidth > 0):
            raise ValueError("bandpass_bandwidth must be below bandpass_center")

    def resolved(self, mode: MechanicalMode) -> "FeedbackConfig":
        """Fill in default bandpass parameters from the mechanical mode."""
        center = self.bandpass_center
        bw = self.bandpass_bandwidth
        if center is None:
            center = mode.frequency_hz
        if bw is None:
            if self.mode == "realistic_chain":
                bw = min(50 * mode.linewidth_hz, 0.9 * center)
            else:
                bw = 0.0
        return replace(self, bandpass_center=center, bandpass_bandwidth=bw)


@dataclass(frozen=True)
class SimConfig:
    """Full description of one simulation run.

    ``burn_in`` defaults to ten amplitude relaxation times (20 / gamma_m) and
    is discarded from the returned trajectory.
    """

    mode: MechanicalMode
    probe: ProbeState
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    sample_rate: float = 0.0
    duration: float = 0.0
    seed: int = 0
    burn_in: float | None = None
    integrator: str = "exact"

    def __post_init__(self):
        if self.sample_rate < 10 * self.mode.frequency_hz:
            raise ValueError("sample_rate must be at least 10x the mechanical frequency")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.duration < 20 * 2 * math.pi / self.mode.gamma_m:
            raise ValueError("duration too short for stationary statistics "
                             "(need >= 20 relaxation times)")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")

    @property
    def burn_in_s(self) -> float:
        if self.burn_in is not None:
            return self.burn_in
        return 20.0 / self.mode.gamma_m


@dataclass
class Trajectory:
    """Uniformly sampled simulation output (burn-in already removed)."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    f_fb: np.ndarray
    config: SimConfig

    def __post_init__(self):
        n = len(self.t)
        if not all(len(a) == n for a in (self.x, self.v, self.y, self.f_fb)):
            raise ValueError("trajectory arrays must have equal length")

    @property
    def sample_rate(self) -> float:
        return self.config.sample_rate

    def position_variance(self) -> float:
        return float(np.var(self.x))

    def temperature(self) -> float:
        """Equipartition temperature m Omega_m^2 <x^2> / k_B from the true displacement."""
        m = self.config.mode
        return m.mass_eff * m.omega_m ** 2 * self.position_variance() / k_B

    def to_csv(self, path) -> None:
        """Write t, x, v, y, f_fb columns with the config echoed as comments."""
        cfg = self.config
        with open(path, "w", newline="") as fh:
            fh.write(csv_header_comments(cfg))
            fh.write("t_s,x_m,v_m_per_s,y_m,f_fb_n\n")
            for row in zip(self.t, self.x, self.v, self.y, self.f_fb):
                fh.write(",".join(f"{val:.17g}" for val in row) + "\n")


def csv_header_comments(cfg: SimConfig) -> str:
    m, p, fb = cfg.mode, cfg.probe, cfg.feedback
    items = {
        "omega_m_rad_s": m.omega_m, "gamma_m_rad_s": m.gamma_m,
        "mass_eff_kg": m.mass_eff, "t_bath_k": m.t_bath,
        "n_c": p.n_c, "g0_rad_s": p.g0, "kappa_rad_s": p.kappa,
        "v_sq": p.v_sq, "eta_d": p.eta_d, "eta_fb": p.eta_fb,
        "feedback_mode": fb.mode, "feedback_gain": fb.gain,
        "bandpass_center_hz": fb.bandpass_center,
        "bandpass_bandwidth_hz": fb.bandpass_bandwidth,
        "delay_s": fb.delay, "sign": fb.sign,
        "sample_rate_hz": cfg.sample_rate, "duration_s": cfg.duration,
        "seed": cfg.seed, "burn_in_s": cfg.burn_in_s,
        "integrator": cfg.integrator,
    }
    buf = io.StringIO()
    for key, val in items.items():
        buf.write(f"# {key}={val}\n")
    return buf.getvalue()


def imprecision_psd(mode: MechanicalMode, probe: ProbeState) -> float:
    """Imprecision scale S_imp = 2 V_d x_zpf^2 / (eta C Gamma_m).

    Satisfies S_imp * eta * mu = x_zpf^2 with the measurement rate mu.  The
    double-sided (Hz convention) displacement-noise floor of the record is
    S_imp / 4; see :func:`imprecision_floor`.
    """
    c = cooperativity(probe, mode)
    if c == 0:
        raise ValueError("no transduction: cooperativity is zero")
    v_d = detected_variance(probe)
    return 2 * v_d * mode.x_zpf ** 2 / (probe.eta_fb * c * mode.gamma_m)


def imprecision_floor(mode: MechanicalMode, probe: ProbeState) -> float:
    """Double-sided white displacement-noise floor of the record, in m^2/Hz.

    This is the delta-correlation constant c_n of the measurement noise
    (<n(t) n(t')> = c_n delta(t - t')), equal to x_zpf^2 / (4 eta mu).  A
    record sampled at f_s carries per-sample noise variance c_n * f_s.  One
    quarter of :func:`imprecision_psd`; this is the unique normalisation for
    which the simulated cooling curve reproduces the closed-form predictions.
    """
    return imprecision_psd(mode, probe) / 4.0


def thermal_force_psd(mode: MechanicalMode) -> float:
    """Double-sided thermal force PSD 2 m Gamma_m k_B T0 in N^2/Hz."""
    return 2 * mode.mass_eff * mode.gamma_m * k_B * mode.t_bath


def _exact_step_matrices(mode: MechanicalMode, dt: float):
    """Discrete-time propagator, ZOH input vector and process-noise Cholesky factor.

    Van Loan's method gives the exact covariance of the integrated thermal
    force over one step for the linear (x, v) system.
    """
    om2 = mode.omega_m ** 2
    gam = mode.gamma_m
    a = np.array([[0.0, 1.0], [-om2, -gam]])
    # continuous noise intensity on the velocity row: c_F / m^2
    q_v = thermal_force_psd(mode) / mode.mass_eff ** 2
    qc = np.array([[0.0, 0.0], [0.0, q_v]])

    big = np.zeros((4, 4))
    big[:2, :2] = -a
    big[:2, 2:] = qc
    big[2:, 2:] = a.T
    e = expm(big * dt)
    phi = e[2:, 2:].T
    qd = phi @ e[:2, 2:]
    qd = 0.5 * (qd + qd.T)

    # ZOH input: integral of expm(A s) ds applied to (0, 1)
    bd = np.linalg.solve(a, (phi - np.eye(2)) @ np.array([0.0, 1.0]))
    chol = cholesky(qd, lower=True)
    return phi, bd, chol


def _plant_matrices(mode: MechanicalMode, dt: float, integrator: str):
    """Discrete plant (phi, bd, chol) for the chosen integrator.

    chol is None for the Euler integrator, whose process noise enters the
    velocity row only.
    """
    if integrator == "exact":
        return _exact_step_matrices(mode, dt)
    phi = np.array([[1.0, dt], [-mode.omega_m ** 2 * dt, 1.0 - mode.gamma_m * dt]])
    bd = np.array([0.0, dt])
    return phi, bd, None


def _viscous_compensation(mode: MechanicalMode, gain: float, dt: float,
                          coeffs, use_bp: bool, phi, bd):
    """Solve the two estimator coefficients by discrete-time pole placement.

    The feedback force is -m Gamma_m G amp (cos(theta) vhat_k -
    Omega_m sin(theta) xhat_{k-1}), with vhat/xhat the (optionally bandpassed)
    central difference and displacement estimates.  amp and theta are chosen
    so the closed-loop characteristic equation has a root exactly at
    z* = exp((-Gamma_m (1+G)/2 + i Omega_d) dt), the sampled ideal
    cold-damped pole.  Returns (amp, theta).
    """
    if gain == 0:
        return 1.0, 0.0
    g_eff = mode.gamma_m * (1 + gain)
    if g_eff >= 2 * mode.omega_m:
        raise ValueError("gain too large for viscous emulation: need "
                         "(1 + G) < 2 Q so the target loop stays underdamped")
    om_d = math.sqrt(mode.omega_m ** 2 - g_eff ** 2 / 4)
    zs = np.exp((-g_eff / 2 + 1j * om_d) * dt)
    zi = 1.0 / zs

    # plant transfer from force/mass (ZOH) to sampled x at z*
    p = np.linalg.solve(zs * np.eye(2) - phi, bd)[0]
    h_bp = 1.0 + 0.0j
    if use_bp:
        b0, b1, b2, a1, a2 = coeffs
        h_bp = (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi)

    rhs = -1.0 / (mode.gamma_m * gain * p * h_bp)
    d1 = (1.0 - zi * zi) / (2.0 * dt)     # central difference at z*
    d2 = zi                               # one-sample-old displacement
    mat = np.array([[d1.real, -(mode.omega_m * d2).real],
                    [d1.imag, -(mode.omega_m * d2).imag]])
    c_v, c_x = np.linalg.solve(mat, [rhs.real, rhs.imag])
    return float(np.hypot(c_v, c_x)), float(math.atan2(c_x, c_v))


def bandpass_biquad(center_hz: float, bandwidth_hz: float, sample_rate: float):
    """Unity-peak-gain bandpass biquad coefficients (b0, b1, b2, a1, a2)."""
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    w0 = 2 * math.pi * center_hz / sample_rate
    if not 0 < w0 < math.pi:
        raise ValueError("bandpass center must be below Nyquist")
    q = center_hz / bandwidth_hz
    alpha = math.sin(w0) / (2 * q)
    a0 = 1 + alpha
    return (alpha / a0, 0.0, -alpha / a0, -2 * math.cos(w0) / a0, (1 - alpha) / a0)


def _loop_parameters(cfg: SimConfig):
    """Assemble the scalar parameters consumed by the integration kernel."""
    mode = cfg.mode
    fb = cfg.feedback.resolved(mode)
    dt = 1.0 / cfg.sample_rate
    fb_mode = FEEDBACK_MODES.index(fb.mode)

    use_bp = fb.bandpass_bandwidth > 0
    if use_bp:
        coeffs = bandpass_biquad(fb.bandpass_center, fb.bandpass_bandwidth,
                                 cfg.sample_rate)
    else:
        if fb.mode == "realistic_chain":
            raise ValueError("realistic_chain requires a bandpass")
        coeffs = (1.0, 0.0, 0.0, 0.0, 0.0)  # pass-through

    if fb.mode == "ideal_viscous":
        integrator = getattr(cfg, "integrator", "exact")
        phi, bd, _ = _plant_matrices(mode, dt, integrator)
        amp, theta = _viscous_compensation(mode, fb.gain, dt, coeffs,
                                           use_bp, phi, bd)
    else:
        amp, theta = 1.0, 0.0

    delay_samples = int(round(fb.delay * cfg.sample_rate))
    return fb, dt, fb_mode, coeffs, theta, amp, delay_samples, use_bp


def run(config: SimConfig) -> Trajectory:
    """Integrate the closed-loop system and return the post-burn-in trajectory.

    Identical configs (including the seed) give bit-identical output.  The
    thermal force and the imprecision noise are drawn from independently
    spawned generator streams.
    """
    mode, probe = config.mode, config.probe
    dt = 1.0 / config.sample_rate
    n_burn = int(round(config.burn_in_s * config.sample_rate))
    n_keep = int(round(config.duration * config.sample_rate))
    n_total = n_burn + n_keep

    fb, dt, fb_mode, coeffs, theta, amp, delay_samples, _ = _loop_parameters(config)

    ss = np.random.SeedSequence(config.seed)
    seed_th, seed_meas = ss.spawn(2)
    rng_th = np.random.default_rng(seed_th)
    rng_meas = np.random.default_rng(seed_meas)

    sigma_y = math.sqrt(imprecision_floor(mode, probe) * config.sample_rate)
    noise_meas = rng_meas.standard_normal(n_total) * sigma_y

    phi, bd, chol = _plant_matrices(mode, dt, config.integrator)
    if config.integrator == "exact":
        w = rng_th.standard_normal((n_total, 2)) @ chol.T
    else:
        # Euler-Maruyama: process noise enters the velocity row only
        q_v = thermal_force_psd(mode) / mode.mass_eff ** 2
        w = np.zeros((n_total, 2))
        w[:, 1] = rng_th.standard_normal(n_total) * math.sqrt(q_v * dt)

    x_lim = INSTABILITY_RMS_FACTOR * math.sqrt(
        k_B * mode.t_bath / (mode.mass_eff * mode.omega_m ** 2))

    x, v, y, f = (np.empty(n_total) for _ in range(4))
    ok = _kernels.integrate_loop(
        phi, bd, w, noise_meas,
        fb_mode, fb.gain, fb.sign,
        mode.mass_eff, mode.gamma_m, mode.omega_m,
        coeffs[0], coeffs[1], coeffs[2], coeffs[3], coeffs[4],
        theta, amp, delay_samples, dt, x_lim,
        x, v, y, f)
    if not ok:
        raise LoopUnstableError(
            "loop unstable: displacement exceeded the instability bound "
            "(anti-damping sign or excess gain)")

    t = np.arange(n_keep) * dt
    sl = slice(n_burn, n_total)
    return Trajectory(t=t, x=x[sl], y=y[sl], v=v[sl], f_fb=f[sl], config=config)


def replay_feedback(y: np.ndarray, config: SimConfig) -> np.ndarray:
    """Recompute the feedback force from a measurement record.

    Applies the configured chain (ideal viscous estimator or bandpass + delay
    + gain) to ``y`` exactly as the integration kernel does; replaying a
    trajectory's own record reproduces its f_fb samples bit-exactly.
    """
    fb, dt, fb_mode, coeffs, theta, amp, delay_samples, _ = _loop_parameters(config)
    out = np.empty(len(y))
    _kernels.feedback_from_record(
        np.asarray(y, dtype=float), fb_mode, fb.gain, fb.sign,
        config.mode.mass_eff, config.mode.gamma_m, config.mode.omega_m,
        coeffs[0], coeffs[1], coeffs[2], coeffs[3], coeffs[4],
        theta, amp, delay_samples, dt, out)
    return out


def ideal_viscous_force(y: np.ndarray, mode: MechanicalMode, gain: float,
                        sample_rate: float,
                        feedback: FeedbackConfig | None = None) -> np.ndarray:
    """Viscous feedback force series -m Gamma_m G v_est for a record y.

    The velocity estimate is a central difference of y, optionally bandpass
    filtered, with the loop's carrier phase at Omega_m compensated.  This is
    the offline equivalent of the in-loop computation; sample k holds the
    force applied over [t_k, t_{k+1}).
    """
    if feedback is None:
        feedback = FeedbackConfig(mode="ideal_viscous", gain=gain)
    else:
        feedback = replace(feedback, mode="ideal_viscous", gain=gain)
    cfg_like = _ForceConfig(mode, feedback, sample_rate)
    return replay_feedback(y, cfg_like)


def realistic_chain_force(y: np.ndarray, mode: MechanicalMode,
                          feedback: FeedbackConfig, sample_rate: float) -> np.ndarray:
    """Feedback force sign * K * BP[y](t - tau) for an electronic chain.

    The delay is quantised to the sample grid; the delay buffer is
    zero-padded during startup.
    """
    if feedback.mode != "realistic_chain":
        raise ValueError("feedback.mode must be 'realistic_chain'")
    cfg_like = _ForceConfig(mode, feedback, sample_rate)
    return replay_feedback(y, cfg_like)


class _ForceConfig:
    """Duck-typed stand-in for SimConfig when only the loop parameters matter."""

    def __init__(self, mode, feedback, sample_rate):
        self.mode = mode
        self.feedback = feedback
        self.sample_rate = sample_rate
