"""Detector types and closed-form detector mathematics.

All times are in nanoseconds and all rates/intensities in ns^-1. Frequencies
that are conventionally quoted in GHz or MHz keep those units in field names
(``gate_frequency`` in GHz is numerically gates per ns).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np


class DomainError(ValueError):
    """Raised when inputs fall outside the domain of a detector formula."""


@dataclass(frozen=True)
class TrapModel:
    """Multi-exponential detrapping intensity ``f(t) = sum a_i exp(-t/tau_i)``.

    Amplitudes are afterpulse intensities in ns^-1 contributed by one seed
    avalanche; each detected avalanche adds its own copy of ``f`` to the
    afterpulse hazard (linear superposition of independent trap populations).

    An empty model (no components) means no afterpulsing.
    """

    amplitudes: tuple[float, ...] = ()
    lifetimes: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        a = tuple(float(x) for x in self.amplitudes)
        tau = tuple(float(x) for x in self.lifetimes)
        if len(a) != len(tau):
            raise DomainError("amplitudes and lifetimes must have equal length")
        if any(not (x > 0 and math.isfinite(x)) for x in a):
            raise DomainError(f"trap amplitudes must be positive and finite: {a}")
        if any(not (x > 0 and math.isfinite(x)) for x in tau):
            raise DomainError(f"trap lifetimes must be positive and finite: {tau}")
        # canonical order: strictly increasing lifetimes
        order = sorted(range(len(tau)), key=lambda i: tau[i])
        a = tuple(a[i] for i in order)
        tau = tuple(tau[i] for i in order)
        if any(t2 <= t1 for t1, t2 in zip(tau, tau[1:])):
            raise DomainError(f"trap lifetimes must be distinct: {tau}")
        if sum(x * t for x, t in zip(a, tau)) >= 1.0:
            raise DomainError("total trap charge sum(a_i*tau_i) must be below 1")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "lifetimes", tau)

    @classmethod
    def from_components(cls, components: Iterable[Sequence[float]]) -> "TrapModel":
        comps = list(components)
        return cls(tuple(c[0] for c in comps), tuple(c[1] for c in comps))

    @classmethod
    def empty(cls) -> "TrapModel":
        return cls()

    @property
    def components(self) -> list[tuple[float, float]]:
        return list(zip(self.amplitudes, self.lifetimes))

    @property
    def n_components(self) -> int:
        return len(self.amplitudes)

    @property
    def total_charge(self) -> float:
        """Expected afterpulse count per seed integrated over all time."""
        return sum(a * t for a, t in self.components)

    def to_dict(self) -> dict:
        return {"amplitudes": list(self.amplitudes), "lifetimes": list(self.lifetimes)}


@dataclass(frozen=True)
class GatedSpadConfig:
    """Sine-gated SPAD.

    Attributes
    ----------
    gate_frequency : float
        Gating frequency f_g in GHz (gates per ns).
    gate_width : float
        Effective gate width t_g in ns.
    efficiency : float
        Detection efficiency eta.
    dark_prob : float
        Dark count probability per gate, P_dc.
    deadtime : float
        Hold-off after a recorded click, ns.
    trap_model : TrapModel
    temperature_label : float
        Metadata only (deg C); nothing depends on it.
    blocked_clicks_fill_traps : bool
        If true, avalanches inside the hold-off still seed afterpulses.
    """

    gate_frequency: float = 2.23
    gate_width: float = 0.1
    efficiency: float = 0.10
    dark_prob: float = 4.8e-7
    deadtime: float = 10.0
    trap_model: TrapModel = field(default_factory=TrapModel)
    temperature_label: float = -40.0
    blocked_clicks_fill_traps: bool = False

    def __post_init__(self) -> None:
        if self.gate_frequency <= 0:
            raise DomainError("gate_frequency must be positive")
        duty = self.gate_width * self.gate_frequency
        if not (0 < duty <= 1 + 1e-12):
            raise DomainError(f"duty cycle t_g*f_g={duty} outside (0, 1]")
        if not (0 <= self.efficiency <= 1):
            raise DomainError("efficiency must lie in [0, 1]")
        if not (0 <= self.dark_prob < 1):
            raise DomainError("dark_prob must lie in [0, 1)")
        if self.deadtime * self.gate_frequency < 1 - 1e-9:
            raise DomainError("deadtime must cover at least one gate period")

    @property
    def kind(self) -> str:
        return "gated"

    @property
    def duty_cycle(self) -> float:
        return self.gate_width * self.gate_frequency

    @property
    def gate_period(self) -> float:
        return 1.0 / self.gate_frequency

    @property
    def dark_rate(self) -> float:
        """Dark counts per ns of armed time (P_dc / t_g)."""
        return self.dark_prob / self.gate_width


@dataclass(frozen=True)
class FreeRunningSpadConfig:
    """Free-running SPAD; ``dark_rate`` in counts per ns."""

    efficiency: float = 0.10
    dark_rate: float = 5e-6
    deadtime: float = 30_000.0
    trap_model: TrapModel = field(default_factory=TrapModel)
    blocked_clicks_fill_traps: bool = False

    def __post_init__(self) -> None:
        if not (0 <= self.efficiency <= 1):
            raise DomainError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise DomainError("dark_rate must be non-negative")
        if self.deadtime <= 0:
            raise DomainError("deadtime must be positive")

    @property
    def kind(self) -> str:
        return "free-running"


@dataclass(frozen=True)
class SspdConfig:
    """Superconducting detector. ``dark_rate`` in counts per ns.

    The recovery time acts as a non-paralyzable deadtime, so the maximum
    count rate is ``1/recovery_time``.
    """

    efficiency: float = 0.10
    dark_rate: float = 1e-8
    recovery_time: float = 20.0

    def __post_init__(self) -> None:
        if not (0 <= self.efficiency <= 1):
            raise DomainError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise DomainError("dark_rate must be non-negative")
        if self.recovery_time <= 0:
            raise DomainError("recovery_time must be positive")

    @property
    def kind(self) -> str:
        return "sspd"

    @property
    def deadtime(self) -> float:
        return self.recovery_time

    @property
    def trap_model(self) -> TrapModel:
        return TrapModel()

    @property
    def max_count_rate(self) -> float:
        """Counts per ns."""
        return 1.0 / self.recovery_time


DetectorConfig = Union[GatedSpadConfig, FreeRunningSpadConfig, SspdConfig]


@dataclass(frozen=True)
class PulseTrainConfig:
    """Laser pulse train: repetition rate in MHz, mean photons per pulse,
    detection window in ns."""

    laser_frequency: float = 10.0
    mean_photons: float = 0.1
    detection_window: float = 0.1

    def __post_init__(self) -> None:
        if self.laser_frequency <= 0:
            raise DomainError("laser_frequency must be positive")
        if self.mean_photons < 0:
            raise DomainError("mean_photons must be non-negative")
        if self.detection_window <= 0:
            raise DomainError("detection_window must be positive")

    @property
    def period(self) -> float:
        """Pulse period in ns."""
        return 1e3 / self.laser_frequency


def efficiency_from_counts(mu: float, dark_prob: float, detection_prob: float) -> float:
    """Detection efficiency from click probabilities.

    ``eta = ln[(1 - P_dc) / (1 - P_de)] / mu``

    Parameters
    ----------
    mu : float
        Mean photon number per laser pulse.
    dark_prob : float
        Dark count probability per gate.
    detection_prob : float
        Click probability per laser pulse.
    """
    if not mu > 0:
        raise DomainError("mu must be positive")
    if not (0 <= dark_prob < 1):
        raise DomainError("dark probability must lie in [0, 1)")
    if not detection_prob < 1:
        raise DomainError("detection probability must be below 1")
    if detection_prob < dark_prob:
        raise DomainError(
            f"detection probability {detection_prob} below dark probability {dark_prob}"
        )
    return (math.log1p(-dark_prob) - math.log1p(-detection_prob)) / mu


def detection_prob(mu: float, eta: float, dark_prob: float) -> float:
    """Click probability per pulse, the inverse of :func:`efficiency_from_counts`."""
    if mu < 0:
        raise DomainError("mu must be non-negative")
    if not (0 <= eta <= 1):
        raise DomainError("efficiency must lie in [0, 1]")
    if not (0 <= dark_prob < 1):
        raise DomainError("dark probability must lie in [0, 1)")
    # 1 - (1-P_dc) exp(-mu*eta), written to keep precision for tiny values
    return -math.expm1(math.log1p(-dark_prob) - mu * eta)


def trap_intensity(trap: TrapModel, dt):
    """Afterpulse intensity ``f(dt)`` in ns^-1. Accepts scalars or arrays."""
    dt_arr = np.asarray(dt, dtype=float)
    if np.any(dt_arr < 0):
        raise DomainError("dt must be non-negative")
    out = np.zeros_like(dt_arr)
    for a, tau in trap.components:
        out = out + a * np.exp(-dt_arr / tau)
    if out.ndim == 0:
        return float(out)
    return out


def afterpulse_prob_between(trap: TrapModel, tau_d: float, delta_t: float) -> float:
    """Integral of ``f`` from ``tau_d`` to ``delta_t`` (``delta_t`` may be inf)."""
    if tau_d < 0:
        raise DomainError("deadtime must be non-negative")
    if delta_t < tau_d:
        raise DomainError(f"interval end {delta_t} precedes deadtime {tau_d}")
    total = 0.0
    for a, tau in trap.components:
        # exp(-x1) - exp(-x2) = exp(-x1) * (1 - exp(x1 - x2)) without cancellation
        x1 = tau_d / tau
        total += a * tau * math.exp(-x1) * -math.expm1(x1 - delta_t / tau)
    return total


def gated_afterpulse_sum(trap: TrapModel, config: GatedSpadConfig, tau_d: float, delta_t: float) -> float:
    """Expected afterpulse count per seed for a gated detector.

    Sums the per-gate hazard ``t_g * f(t_k)`` over the gates ``t_k`` in
    ``[tau_d, delta_t)`` that follow a click at gate zero. Equal to
    ``duty_cycle * afterpulse_prob_between`` up to a Riemann-sum error.
    """
    fg = config.gate_frequency
    k0 = _ceil_gates(tau_d * fg)
    total = 0.0
    for a, tau in trap.components:
        q = math.exp(-1.0 / (tau * fg))
        head = q**k0
        if math.isinf(delta_t):
            tail = 0.0
        else:
            k1 = _ceil_gates(delta_t * fg)
            tail = q ** max(k1, k0)
        total += config.gate_width * a * (head - tail) / (1.0 - q)
    return total


def _ceil_gates(x: float) -> int:
    # tolerant ceiling so that exact multiples of the gate period survive rounding
    return int(math.ceil(x - 1e-9))
