"""
Afterpulsing from a trap model
==============================

A SPAD's afterpulse hazard after a click is a sum of exponentials, one per
trap level. This walk-through builds the calibrated two-level model and
asks how much afterpulsing survives different deadtimes.
"""
import math

from spadlab import GatedSpadConfig, afterpulse_prob_between, gated_afterpulse_sum
from spadlab.calibration import calibrate_trap_model

# The calibrated model: a 100 ns level and a slow 1.2 us level.
trap = calibrate_trap_model()
for a, tau in trap.components:
    print(f"level: amplitude {a:.3e} /ns, lifetime {tau:.0f} ns")

# The closed form integrates the hazard between two delays.
for tau_d in (10.0, 50.0, 500.0, 5000.0):
    p = afterpulse_prob_between(trap, tau_d, math.inf)
    print(f"deadtime {tau_d:6.0f} ns -> afterpulse probability {p:.4f}")

# A gated detector only arms for 100 ps of each 448 ps period, so per click
# it sees roughly the duty cycle times that integral.
det = GatedSpadConfig(trap_model=trap)
print(f"gated, 10 ns deadtime: {gated_afterpulse_sum(trap, det, det.deadtime, math.inf):.4f}"
      f" (duty cycle {det.duty_cycle:.3f})")
