"""Squeezed-light-enhanced feedback cooling: models, simulation and analysis."""

from .model import (
    CavityVariance,
    CoolingPrediction,
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
from .simulate import (
    FeedbackConfig,
    LoopUnstableError,
    SimConfig,
    Trajectory,
    imprecision_floor,
    imprecision_psd,
    run,
)
from .dsp import (
    MarginalHistogram,
    PhaseSpaceTrack,
    Spectrum,
    equipartition_temperature,
    lockin_demodulate,
    marginal_histogram,
    shot_noise_reference,
    welch_psd,
)
from .specfit import (
    FitResult,
    GainCalibration,
    SquashModel,
    effective_temperature,
    fit_spectrum,
    gain_calibration,
    initial_guess,
    synthesize_spectrum,
)

__version__ = "0.1.0"
