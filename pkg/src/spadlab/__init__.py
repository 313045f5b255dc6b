"""Single-photon detector afterpulsing, characterization and COW QKD key rates.

Units are nanoseconds and ns^-1 throughout the library; configuration files
and CSV headers name their units explicitly.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .detector import (
    DomainError,
    FreeRunningSpadConfig,
    GatedSpadConfig,
    PulseTrainConfig,
    SspdConfig,
    TrapModel,
    afterpulse_prob_between,
    detection_prob,
    efficiency_from_counts,
    gated_afterpulse_sum,
    trap_intensity,
)
from .montecarlo import Cause, SimRun, simulate, simulate_free_running, simulate_gated
from .qkd import LinkConfig, scan_distance, secure_key_rate, solve_operating_point
from .trapfit import FitResult, fit_histogram, fit_multi_exponential, integrate_fit

__all__ = [
    "Cause", "DomainError", "FitResult", "FreeRunningSpadConfig", "GatedSpadConfig",
    "LinkConfig", "PulseTrainConfig", "SimRun", "SspdConfig", "TrapModel",
    "afterpulse_prob_between", "detection_prob", "efficiency_from_counts",
    "fit_histogram", "fit_multi_exponential", "gated_afterpulse_sum", "integrate_fit",
    "scan_distance", "secure_key_rate", "simulate", "simulate_free_running",
    "simulate_gated", "solve_operating_point", "trap_intensity",
]
