"""Closed-form predictions for cold-damping feedback cooling with a squeezed probe.

All quadrature variances are in shot-noise units with vacuum = 1/2, and all
angular frequencies are stored in rad/s.  Helpers accept Hz and dB at the
boundary and convert once.

The central quantities:

* detected variance  V_d = eta_d * V_sq + (1 - eta_d) / 2
* cooperativity      C   = 4 g0^2 N_c / (kappa * Gamma_m)
* feedback-cooled temperature
      T_fb = (1 + V_d G^2 / (8 eta n_th C)) * T0 / (1 + G)
  which reaches its minimum at G_opt = sqrt(1 + 8 eta n_th C / V_d) - 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

from scipy.constants import hbar, k as k_B

VACUUM_VARIANCE = 0.5


def variance_from_db(db: float) -> float:
    """Quadrature variance for a noise level `db` decibels above vacuum.

    Negative values mean squeezing (below vacuum)."""
    return VACUUM_VARIANCE * 10.0 ** (db / 10.0)


def db_from_variance(v: float) -> float:
    """Noise level in dB relative to vacuum (negative = squeezed)."""
    if v <= 0:
        raise ValueError("variance must be positive")
    return 10.0 * math.log10(v / VACUUM_VARIANCE)


@dataclass(frozen=True)
class MechanicalMode:
    """A damped mechanical oscillator mode coupled to a thermal bath.

    omega_m and gamma_m are angular rates (rad/s); gamma_m is the FWHM energy
    damping rate.  The mode must be underdamped (Q > 1).
    """

    omega_m: float
    gamma_m: float
    mass_eff: float
    t_bath: float

    def __post_init__(self):
        if self.omega_m <= 0 or self.gamma_m <= 0 or self.mass_eff <= 0:
            raise ValueError("omega_m, gamma_m and mass_eff must be positive")
        if self.t_bath < 0:
            raise ValueError("t_bath must be non-negative")
        if self.omega_m / self.gamma_m <= 1:
            raise ValueError("mode must be underdamped (omega_m/gamma_m > 1)")

    @classmethod
    def from_hz(cls, frequency_hz, linewidth_hz, mass_kg, temperature_k) -> "MechanicalMode":
        return cls(2 * math.pi * frequency_hz, 2 * math.pi * linewidth_hz,
                   mass_kg, temperature_k)

    @property
    def frequency_hz(self) -> float:
        return self.omega_m / (2 * math.pi)

    @property
    def linewidth_hz(self) -> float:
        return self.gamma_m / (2 * math.pi)

    @property
    def quality_factor(self) -> float:
        return self.omega_m / self.gamma_m

    @property
    def x_zpf(self) -> float:
        """Zero-point fluctuation amplitude sqrt(hbar / 2 m omega_m) in metres."""
        return math.sqrt(hbar / (2 * self.mass_eff * self.omega_m))

    def thermal_occupancy(self, exact: bool = False) -> float:
        """Mean bath phonon number.

        Defaults to the high-temperature form k_B T / (hbar omega_m); set
        ``exact=True`` for the Bose occupancy 1/(exp(hbar omega/kT) - 1).
        """
        if self.t_bath == 0:
            return 0.0
        ratio = hbar * self.omega_m / (k_B * self.t_bath)
        if exact:
            return 1.0 / math.expm1(ratio)
        return 1.0 / ratio

    def thermal_variance(self) -> float:
        """Equipartition position variance k_B T / (m omega_m^2) in m^2."""
        return k_B * self.t_bath / (self.mass_eff * self.omega_m ** 2)


@dataclass(frozen=True)
class ProbeState:
    """Optical probe used to read out the mechanical position.

    v_sq is the squeezed-quadrature variance at the source (vacuum = 1/2),
    eta_d the transmission/detection efficiency seen by the squeezed mode and
    eta_fb the signal detection efficiency of the feedback loop.
    """

    n_c: float
    g0: float
    kappa: float
    v_sq: float = VACUUM_VARIANCE
    eta_d: float = 1.0
    eta_fb: float = 1.0
    quadrature: str = "phase_squeezed"

    _QUADRATURES = ("phase_squeezed", "amplitude_squeezed", "coherent")

    def __post_init__(self):
        if self.n_c < 0 or self.g0 < 0:
            raise ValueError("n_c and g0 must be non-negative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.v_sq <= 0:
            raise ValueError("v_sq must be positive")
        if not 0 < self.eta_d <= 1 or not 0 < self.eta_fb <= 1:
            raise ValueError("efficiencies must lie in (0, 1]")
        if self.quadrature not in self._QUADRATURES:
            raise ValueError(f"quadrature must be one of {self._QUADRATURES}")
        if self.quadrature == "coherent" and not math.isclose(self.v_sq, VACUUM_VARIANCE):
            raise ValueError("a coherent probe has v_sq = 1/2")

    @classmethod
    def coherent(cls, n_c, g0, kappa, eta_d=1.0, eta_fb=1.0) -> "ProbeState":
        return cls(n_c, g0, kappa, VACUUM_VARIANCE, eta_d, eta_fb, "coherent")

    @classmethod
    def from_cooperativity(cls, cooperativity, gamma_m, n_c, kappa, **kwargs) -> "ProbeState":
        """Back-solve g0 from a target cooperativity for the given mode linewidth."""
        if cooperativity < 0:
            raise ValueError("cooperativity must be non-negative")
        if n_c <= 0:
            raise ValueError("n_c must be positive to back-solve g0")
        g0 = math.sqrt(cooperativity * kappa * gamma_m / (4 * n_c))
        return cls(n_c, g0, kappa, **kwargs)

    def with_squeezing_db(self, db: float) -> "ProbeState":
        """Copy of this probe with the source squeezing set in dB below vacuum."""
        v = variance_from_db(-abs(db))
        if db == 0:
            quad = "coherent"
        elif self.quadrature == "coherent":
            quad = "phase_squeezed"
        else:
            quad = self.quadrature
        return replace(self, v_sq=v, quadrature=quad)


@dataclass(frozen=True)
class CavityVariance:
    """Intra-cavity (anti-squeezed) quadrature variance in shot-noise units."""

    v_c: float

    def __post_init__(self):
        if self.v_c <= 0:
            raise ValueError("v_c must be positive")
        if self.v_c < VACUUM_VARIANCE:
            warnings.warn("v_c below vacuum: formula is defined but this is not "
                          "the anti-squeezed use case", stacklevel=2)

    @classmethod
    def from_db(cls, db: float) -> "CavityVariance":
        return cls(variance_from_db(db))


@dataclass(frozen=True)
class CoolingPrediction:
    """Predicted feedback-cooled temperature at a given gain."""

    gain: float
    t_fb: float
    n_fb: float
    t0: float

    @property
    def ratio(self) -> float:
        return self.t_fb / self.t0


def detected_variance(probe: ProbeState) -> float:
    """Probe quadrature variance after loss: eta_d V_sq + (1 - eta_d)/2."""
    return probe.eta_d * probe.v_sq + (1 - probe.eta_d) * VACUUM_VARIANCE


def cooperativity(probe: ProbeState, mode: MechanicalMode) -> float:
    """Optomechanical cooperativity 4 g0^2 N_c / (kappa Gamma_m)."""
    return 4 * probe.g0 ** 2 * probe.n_c / (probe.kappa * mode.gamma_m)


def measurement_rate(mode: MechanicalMode, probe: ProbeState) -> float:
    """Position measurement rate mu = C Gamma_m / (2 V_d) in rad/s."""
    return cooperativity(probe, mode) * mode.gamma_m / (2 * detected_variance(probe))


def thermal_decoherence_rate(mode: MechanicalMode, exact: bool = False) -> float:
    """Rate Gamma_m n_th at which bath phonons enter the mode (rad/s)."""
    return mode.gamma_m * mode.thermal_occupancy(exact=exact)


def noise_calibration(mode: MechanicalMode, probe: ProbeState,
                      exact_occupancy: bool = False) -> float:
    """Dimensionless measurement-to-thermal ratio A = 8 eta n_th C / V_d.

    The cooled temperature is T0 (1 + G^2/A) / (1 + G) and the optimal gain
    is sqrt(1 + A) - 1.
    """
    c = cooperativity(probe, mode)
    if c == 0:
        raise ValueError("no transduction: cooperativity is zero")
    n_th = mode.thermal_occupancy(exact=exact_occupancy)
    return 8 * probe.eta_fb * n_th * c / detected_variance(probe)


def predict_temperature(mode: MechanicalMode, probe: ProbeState, gain: float,
                        exact_occupancy: bool = False) -> CoolingPrediction:
    """Feedback-cooled temperature for viscous feedback at the given gain."""
    if gain < 0:
        raise ValueError("gain must be non-negative")
    a = noise_calibration(mode, probe, exact_occupancy)
    t_fb = (1 + gain ** 2 / a) * mode.t_bath / (1 + gain)
    n_fb = k_B * t_fb / (hbar * mode.omega_m)
    return CoolingPrediction(gain=gain, t_fb=t_fb, n_fb=n_fb, t0=mode.t_bath)


def optimal_gain(mode: MechanicalMode, probe: ProbeState,
                 exact_occupancy: bool = False) -> float:
    """Gain minimising the cooled temperature: sqrt(1 + 8 eta n_th C / V_d) - 1."""
    return math.sqrt(1 + noise_calibration(mode, probe, exact_occupancy)) - 1


def minimum_temperature(mode: MechanicalMode, probe: ProbeState,
                        exact_occupancy: bool = False) -> float:
    """Cooled temperature at the optimal gain: 2 T0 / (sqrt(1 + A) + 1)."""
    a = noise_calibration(mode, probe, exact_occupancy)
    return 2 * mode.t_bath / (math.sqrt(1 + a) + 1)


def coherent_occupancy_floor(eta_fb: float) -> float:
    """Minimum occupancy reachable with a coherent probe: 1/(2 sqrt(eta)) - 1/2."""
    if not 0 < eta_fb <= 1:
        raise ValueError("eta_fb must lie in (0, 1]")
    return 1 / (2 * math.sqrt(eta_fb)) - 0.5


def effective_efficiency(eta_fb: float, v_c) -> float:
    """Loss-mitigated efficiency with amplitude squeezing.

    eta_eff = (1 + (1 - eta) / (2 eta V_c))^-1; reduces to eta at V_c = 1/2
    and approaches 1 as V_c grows.
    """
    if not 0 < eta_fb <= 1:
        raise ValueError("eta_fb must lie in (0, 1]")
    vc = v_c.v_c if isinstance(v_c, CavityVariance) else float(v_c)
    if vc <= 0:
        raise ValueError("v_c must be positive")
    return 1.0 / (1 + (1 - eta_fb) / (2 * eta_fb * vc))


def interaction_strength(probe: ProbeState) -> float:
    """Pulsed-scheme interaction strength chi = 4 g0 sqrt(N_c) / kappa.

    With 10 dB of input squeezing, 10 dB of mechanical squeezing needs
    chi = 1; a coherent input needs chi >= sqrt(10) for the same target.
    """
    return 4 * probe.g0 * math.sqrt(probe.n_c) / probe.kappa


def cooling_curve(mode: MechanicalMode, probe: ProbeState, gains,
                  exact_occupancy: bool = False) -> list[CoolingPrediction]:
    """Tabulate the cooled temperature over a list of gains."""
    return [predict_temperature(mode, probe, g, exact_occupancy) for g in gains]


def squeezing_sweep(mode: MechanicalMode, base_probe: ProbeState, squeezing_db,
                    exact_occupancy: bool = False) -> list[tuple[float, float]]:
    """Minimum achievable temperature versus source squeezing in dB below vacuum.

    Losses are applied through the detected variance of `base_probe` (its
    eta_d and eta_fb are kept fixed while v_sq is swept).
    """
    out = []
    for db in squeezing_db:
        probe = base_probe.with_squeezing_db(db)
        out.append((db, minimum_temperature(mode, probe, exact_occupancy)))
    return out
