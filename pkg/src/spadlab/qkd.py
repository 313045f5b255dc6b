"""Secure key rate of the coherent one-way (COW) protocol over fiber.

The detector enters through its efficiency, its noise per detection window,
its deadtime and (for SPADs) its trap model. Afterpulsing and deadtime are
coupled: the mean time between detections sets how much of the trap
emission escapes the deadtime, which in turn inflates the click rate. That
loop is solved by fixed-point iteration in :func:`solve_operating_point`.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .detector import (
    DomainError,
    GatedSpadConfig,
    SspdConfig,
    afterpulse_prob_between,
)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    """COW link parameters.

    Attributes
    ----------
    fiber_attenuation : float
        dB/km.
    bob_insertion_loss : float
        dB.
    pulse_rate : float
        MHz.
    mean_photons : float
        Mean photon number per pulse.
    decoy_probability : float
    visibility : float
        Monitoring-line interference visibility.
    optical_error : float
        Probability that a signal photon lands in the wrong time bin.
    ec_efficiency : float
        Error-correction inefficiency f_EC (>= 1).
    sifting_factor : float
    detection_window : float
        ns.
    """

    fiber_attenuation: float = 0.2
    bob_insertion_loss: float = 3.0
    pulse_rate: float = 625.0
    mean_photons: float = 0.5
    decoy_probability: float = 0.1
    visibility: float = 0.98
    optical_error: float = 0.01
    ec_efficiency: float = 1.1
    sifting_factor: float = 0.5
    detection_window: float = 0.1

    def __post_init__(self) -> None:
        if not self.fiber_attenuation > 0:
            raise DomainError("fiber_attenuation must be positive")
        if self.bob_insertion_loss < 0:
            raise DomainError("bob_insertion_loss must be non-negative")
        if not self.pulse_rate > 0:
            raise DomainError("pulse_rate must be positive")
        if self.mean_photons < 0:
            raise DomainError("mean_photons must be non-negative")
        if not (0 <= self.decoy_probability < 1):
            raise DomainError("decoy_probability must lie in [0, 1)")
        if not (0 < self.visibility <= 1):
            raise DomainError("visibility must lie in (0, 1]")
        if not (0 <= self.optical_error <= 0.5):
            raise DomainError("optical_error must lie in [0, 0.5]")
        if self.ec_efficiency < 1:
            raise DomainError("ec_efficiency must be at least 1")
        if not (0 < self.sifting_factor <= 1):
            raise DomainError("sifting_factor must lie in (0, 1]")
        if not self.detection_window > 0:
            raise DomainError("detection_window must be positive")

    def with_(self, **changes) -> "LinkConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class KeyRatePoint:
    distance: float
    transmittance: float
    p_signal: float
    p_noise: float
    P_ap_bar: float
    p_click: float
    click_rate_pre_deadtime: float
    detected_rate: float
    delta_T_bar: float
    qber: float
    phase_error: float
    secure_rate: float
    n_iterations: int = 0


def binary_entropy(x: float) -> float:
    if not (0 <= x <= 1):
        raise DomainError("binary entropy needs x in [0, 1]")
    if x == 0 or x == 1:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def link_transmittance(distance: float, link: LinkConfig) -> float:
    if distance < 0:
        raise DomainError("distance must be non-negative")
    return 10 ** (-(link.fiber_attenuation * distance + link.bob_insertion_loss) / 10)


def noise_prob_per_window(detector, window: float) -> float:
    """Dark click probability in one detection window."""
    if window < 0:
        raise DomainError("window must be non-negative")
    if isinstance(detector, GatedSpadConfig):
        return detector.dark_prob * window / detector.gate_width
    return detector.dark_rate * window


def _detector_deadtime(detector) -> float:
    if isinstance(detector, SspdConfig):
        return detector.recovery_time
    return detector.deadtime


def _map(p_ap: float, p_sig: float, p_noise: float, rate_per_ns: float, tau_d: float, trap):
    p_click = (p_sig + p_noise) / (1.0 - p_ap)
    click_rate = rate_per_ns * p_click
    detected = click_rate / (1.0 + click_rate * tau_d)
    delta_t = math.inf if detected == 0 else 1.0 / detected
    new_p_ap = afterpulse_prob_between(trap, tau_d, max(delta_t, tau_d))
    return new_p_ap, p_click, click_rate, detected, delta_t


def solve_operating_point(
    detector,
    link: LinkConfig,
    distance: float,
    *,
    tol: float = 1e-12,
    max_iter: int = 1000,
    p_ap_start: float = 0.0,
    damping: float = 0.0,
) -> KeyRatePoint:
    """Self-consistent click rates, QBER and secure key rate at ``distance``.

    Starting from ``P_ap = p_ap_start`` it iterates
    ``p_click = (p_signal + p_noise) / (1 - P_ap)``,
    ``R = pulse_rate * p_click``, ``R_det = R / (1 + R tau_d)``,
    ``dT = 1 / R_det``, ``P_ap = int_{tau_d}^{dT} f`` until ``P_ap`` moves
    by less than ``tol``. ``damping`` in [0, 1) mixes in the previous value.
    """
    if distance < 0:
        raise DomainError("distance must be non-negative")
    trans = link_transmittance(distance, link)
    p_sig = -math.expm1(-link.mean_photons * trans * detector.efficiency)
    p_noise = noise_prob_per_window(detector, link.detection_window)
    tau_d = _detector_deadtime(detector)
    trap = detector.trap_model
    rate = link.pulse_rate * 1e-3  # pulses per ns

    p_ap = p_ap_start
    it = 0
    for it in range(1, max_iter + 1):
        if p_ap >= 1:
            raise ConvergenceError(f"afterpulse probability reached {p_ap} at {distance} km")
        new, p_click, click_rate, detected, delta_t = _map(p_ap, p_sig, p_noise, rate, tau_d, trap)
        new = damping * p_ap + (1 - damping) * new
        done = abs(new - p_ap) < tol
        p_ap = new
        if done:
            break
    else:
        raise ConvergenceError(f"operating point did not converge at {distance} km")
    if p_ap >= 1:
        raise ConvergenceError(f"afterpulse probability reached {p_ap} at {distance} km")
    _, p_click, click_rate, detected, delta_t = _map(p_ap, p_sig, p_noise, rate, tau_d, trap)

    point = KeyRatePoint(
        distance=float(distance),
        transmittance=trans,
        p_signal=p_sig,
        p_noise=p_noise,
        P_ap_bar=p_ap,
        p_click=p_click,
        click_rate_pre_deadtime=click_rate * 1e9,
        detected_rate=detected * 1e9,
        delta_T_bar=delta_t,
        qber=0.0,
        phase_error=(1 - link.visibility) / 2,
        secure_rate=0.0,
        n_iterations=it,
    )
    qber = _qber(point, link)
    point = replace(point, qber=qber)
    return replace(point, secure_rate=secure_key_rate(point, link))


def _qber(point: KeyRatePoint, link: LinkConfig) -> float:
    if point.p_click <= 0:
        return 0.5
    p_ap_contrib = point.P_ap_bar * point.p_click
    q = (0.5 * (point.p_noise + p_ap_contrib) + link.optical_error * point.p_signal) / point.p_click
    return min(max(q, 0.0), 0.5)


def secure_key_rate(point: KeyRatePoint, link: LinkConfig) -> float:
    """Secure bits per second at an operating point.

    ``R = R_det (1 - p_decoy) s max(0, 1 - f_EC h(Q) - h(e_ph))``; afterpulse
    and dark clicks carry random bits, so they enter only through Q.
    """
    q = point.qber if point.qber else _qber(point, link)
    e_ph = (1 - link.visibility) / 2
    frac = 1 - link.ec_efficiency * binary_entropy(q) - binary_entropy(e_ph)
    return point.detected_rate * (1 - link.decoy_probability) * link.sifting_factor * max(0.0, frac)


@dataclass
class DistanceScan:
    detector_id: str
    points: list[KeyRatePoint]
    max_distance: float

    @property
    def distances(self) -> np.ndarray:
        return np.array([p.distance for p in self.points])

    @property
    def secure_rates(self) -> np.ndarray:
        return np.array([p.secure_rate for p in self.points])


def max_distance(detector, link: LinkConfig, grid: Sequence[float], resolution: float = 0.1) -> float:
    """Largest distance with a positive secure rate, bisected to ``resolution``."""
    grid = list(grid)
    rates = [solve_operating_point(detector, link, d).secure_rate for d in grid]
    pos = [i for i, r in enumerate(rates) if r > 0]
    if not pos:
        return 0.0
    i = pos[-1]
    if i == len(grid) - 1:
        return float(grid[-1])
    lo, hi = grid[i], grid[i + 1]
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if solve_operating_point(detector, link, mid).secure_rate > 0:
            lo = mid
        else:
            hi = mid
    return float(lo)


def scan_distance(detectors, link: LinkConfig, distance_grid: Sequence[float]) -> list[DistanceScan]:
    """Key-rate curves for each detector over a sorted distance grid.

    ``detectors`` is a mapping of id to config or a list of ``(id, config)``.
    """
    grid = [float(d) for d in distance_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise DomainError("distance grid must be sorted ascending")
    items = detectors.items() if hasattr(detectors, "items") else detectors
    out = []
    for det_id, det in items:
        points = [solve_operating_point(det, link, d) for d in grid]
        out.append(DistanceScan(det_id, points, max_distance(det, link, grid)))
    return out


SCAN_COLUMNS = [
    "detector_id", "distance_km", "transmittance", "p_signal", "p_noise",
    "P_ap_bar", "qber", "detected_rate_hz", "secure_rate_bps",
]


def scan_to_csv(scans: Sequence[DistanceScan], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCAN_COLUMNS)
    for scan in scans:
        for p in scan.points:
            w.writerow([
                scan.detector_id, f"{p.distance:g}", f"{p.transmittance:.9e}",
                f"{p.p_signal:.9e}", f"{p.p_noise:.9e}", f"{p.P_ap_bar:.9e}",
                f"{p.qber:.9e}", f"{p.detected_rate:.9e}", f"{p.secure_rate:.9e}",
            ])
    text = buf.getvalue()
    if path is not None:
        from .io import atomic_write_text

        atomic_write_text(path, text)
    return text
