"""
From click timestamps to a trap model
=====================================

Characterization uses timing only: photon-coincident clicks give the
efficiency, quiet gates give the dark count, and the delay histogram
after photon clicks gives the afterpulse intensity, which a
two-exponential fit turns back into trap levels. A 500 kHz laser leaves
2 us between pulses, room for a 1 us histogram.
"""
from dataclasses import replace

from spadlab import PulseTrainConfig, simulate_gated
from spadlab.calibration import CHARACTERIZATION_DETECTOR, calibrate_trap_model
from spadlab.estimators import (
    afterpulse_histogram,
    classify_coincidences,
    estimate_dark_prob,
    estimate_efficiency,
)
from spadlab.trapfit import fit_histogram

trap = calibrate_trap_model()
det = replace(CHARACTERIZATION_DETECTOR, trap_model=trap)
train = PulseTrainConfig(laser_frequency=0.5, mean_photons=0.3)

# A shorter run than the reference one (about 20 s); the fit is noisier.
run = simulate_gated(det, train, 200_000_000_000, seed=3)
res = classify_coincidences(run)
dark = estimate_dark_prob(run)
print(f"efficiency {estimate_efficiency(res, train.mean_photons, dark.P_dc):.4f} (true 0.1)")
print(f"dark count per gate {dark.P_dc:.2e} +- {dark.sigma:.1e} (true {det.dark_prob:.1e})")

hist = afterpulse_histogram(run, window=50.0, range_=1000.0)
print(f"{hist.n_seed_clicks} photon seeds")
fit = fit_histogram(hist, 2)
for (a, tau), (a0, tau0) in zip(fit.model.components, trap.components):
    print(f"fit: {a:.3e} /ns, {tau:6.0f} ns   true: {a0:.3e} /ns, {tau0:6.0f} ns")
