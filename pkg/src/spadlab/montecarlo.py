"""Event-driven Monte Carlo of detector click streams.

Each noise source (dark counts, photon detections, one afterpulse process per
trap component) is sampled for its first firing time from the current
position; the earliest one becomes the next click and the others are
resampled afterwards, which is exact because every source is memoryless
given the current trap occupation. Work is therefore proportional to the
number of clicks, not the number of gates.

Trap occupation is kept as one running sum per component that decays by a
constant factor per gate (or per ns), so memory is O(components).
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from .detector import (
    DomainError,
    FreeRunningSpadConfig,
    GatedSpadConfig,
    PulseTrainConfig,
    SspdConfig,
    TrapModel,
    detection_prob,
)

GENERATOR_ID = "numpy.random.Generator(PCG64)"
DEFAULT_MAX_EVENTS = 20_000_000


class ConfigurationError(ValueError):
    """Inconsistent simulation setup (e.g. laser pulses off the gate grid)."""


class Cause(enum.IntEnum):
    PHOTON = 0
    DARK = 1
    AFTERPULSE = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, text: str) -> "Cause":
        return cls[text.strip().upper()]


@dataclass(frozen=True)
class DetectionRecord:
    time: float
    cause: Cause | None
    gate_index: int | None = None


@dataclass
class SimRun:
    """Result of one simulation.

    Events are stored column-wise: ``times`` in ns, ``causes`` as
    :class:`Cause` codes (-1 when unknown, e.g. ingested hardware data) and
    ``gate_index`` (-1 for free-running detectors). ``n_blocked`` counts
    avalanches hidden by the deadtime; they are only generated (and so only
    counted) when the detector's ``blocked_clicks_fill_traps`` is set, since
    otherwise they have no observable effect.
    """

    config: Union[GatedSpadConfig, FreeRunningSpadConfig, SspdConfig, None]
    pulse_train: PulseTrainConfig | None
    duration: float
    seed: int | None
    times: np.ndarray
    causes: np.ndarray
    gate_index: np.ndarray
    n_gates: int | None = None
    n_blocked: int = 0
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def events(self) -> list[DetectionRecord]:
        return list(self.records())

    def records(self) -> Iterator[DetectionRecord]:
        for t, c, g in zip(self.times, self.causes, self.gate_index):
            yield DetectionRecord(
                float(t),
                Cause(int(c)) if c >= 0 else None,
                int(g) if g >= 0 else None,
            )

    def count(self, cause: Cause) -> int:
        return int(np.count_nonzero(self.causes == cause))

    @property
    def afterpulse_fraction(self) -> float:
        """Ground-truth afterpulse clicks over all clicks."""
        if len(self) == 0:
            return 0.0
        return self.count(Cause.AFTERPULSE) / len(self)

    @property
    def n_pulses(self) -> int:
        if self.pulse_train is None:
            raise ConfigurationError("run has no pulse train")
        return int(math.ceil(self.duration / self.pulse_train.period - 1e-9))

    def to_csv(self, path=None) -> str:
        """Write ``time_ns,cause,gate_index``; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ns", "cause", "gate_index"])
        for t, c, g in zip(self.times, self.causes, self.gate_index):
            w.writerow([
                f"{t:.3f}",
                Cause(int(c)).label if c >= 0 else "",
                str(int(g)) if g >= 0 else "",
            ])
        text = buf.getvalue()
        if path is not None:
            from .io import atomic_write_text

            atomic_write_text(path, text)
        return text


class _Uniforms:
    """Buffered uniform draws from a PCG64 stream."""

    def __init__(self, seed: int, block: int = 1 << 16):
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._rng.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def exponential(self) -> float:
        return -math.log1p(-self())


def _geometric(u: float, log_q: float) -> float:
    """Failures before the first success; ``log_q = log(1 - p)``."""
    if log_q == 0.0:
        return math.inf
    if log_q == -math.inf:
        return 0
    return math.floor(math.log1p(-u) / log_q)


def _laser_gate_ratio(config: GatedSpadConfig, train: PulseTrainConfig) -> int:
    ratio = config.gate_frequency * train.period
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * ratio:
        raise ConfigurationError(
            f"laser period {train.period} ns is not a whole number of gate periods "
            f"({ratio:.6g})"
        )
    return n


def _check_cap(expected: float, max_events: int) -> None:
    if expected > max_events:
        raise OverflowError(
            f"expected ~{expected:.3g} events exceeds the cap of {max_events}"
        )


def simulate_gated(
    config: GatedSpadConfig,
    train: PulseTrainConfig,
    n_gates: int,
    seed: int,
    *,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> SimRun:
    """Simulate ``n_gates`` gates of a gated SPAD under a pulsed laser.

    In gate k the afterpulse hazard is ``t_g * sum_clicks f(t_k - t_click)``;
    a click happens with probability
    ``1 - (1 - P_dc)(1 - p_photon)(1 - p_afterpulse)`` where
    ``p_afterpulse = 1 - exp(-hazard)``. When several sources fire in the same
    gate the cause is drawn in proportion to their hazards. Clicks within the
    deadtime of the previous recorded click are dropped and, unless
    ``config.blocked_clicks_fill_traps`` is set, do not seed traps.
    """
    n_gates = int(n_gates)
    if n_gates < 1:
        raise DomainError("n_gates must be at least 1")
    p_ph = detection_prob(train.mean_photons, config.efficiency, 0.0)
    if p_ph > 0:
        per_pulse = _laser_gate_ratio(config, train)
    else:
        per_pulse = max(1, int(round(config.gate_frequency * train.period)))
    trap = config.trap_model
    fg = config.gate_frequency
    tg = config.gate_width
    n_dead = max(1, int(math.ceil(config.deadtime * fg - 1e-9)))
    fill_blocked = config.blocked_clicks_fill_traps

    expected = n_gates * (config.dark_prob + p_ph / per_pulse)
    expected *= 1.0 + config.duty_cycle * trap.total_charge / max(1e-12, 1 - trap.total_charge)
    _check_cap(expected, max_events)

    uni = _Uniforms(seed)
    log_q_dark = math.log1p(-config.dark_prob)
    log_q_ph = math.log1p(-p_ph) if p_ph < 1 else -math.inf
    h_dark = -log_q_dark
    h_ph = -log_q_ph
    amps = list(trap.amplitudes)
    decay = [math.exp(-1.0 / (tau * fg)) for tau in trap.lifetimes]
    log_decay = [math.log(q) for q in decay]
    n_comp = len(amps)
    # per-gate hazard t_g * S_i of each component at the current gate
    occ = [0.0] * n_comp

    gates: list[int] = []
    causes: list[int] = []
    n_blocked = 0
    k = 0
    allowed = 0
    while k < n_gates:
        best = math.inf
        # dark
        kd = k + _geometric(uni(), log_q_dark)
        best = kd
        # photon: pulses sit on gates m * per_pulse
        kp = math.inf
        if p_ph > 0:
            m0 = -(-k // per_pulse)
            kp = (m0 + _geometric(uni(), log_q_ph)) * per_pulse
            best = min(best, kp)
        # afterpulses: hazard c*q^j in gate k+j, cumulative c(1-q^n)/(1-q)
        ka = [math.inf] * n_comp
        for i in range(n_comp):
            c = occ[i]
            if c <= 0.0:
                continue
            total = c / (1.0 - decay[i])
            e = uni.exponential()
            if e >= total:
                continue
            j = math.floor(math.log1p(-e / total) / log_decay[i])
            ka[i] = k + j
            if ka[i] < best:
                best = ka[i]
        if best >= n_gates:
            break
        kn = int(best)
        step = kn - k
        for i in range(n_comp):
            if occ[i] > 0.0:
                occ[i] *= decay[i] ** step

        # cause, weighted by hazard among the sources firing in this gate
        weights = []
        labels = []
        if kd == kn:
            weights.append(h_dark)
            labels.append(Cause.DARK)
        if kp == kn:
            weights.append(h_ph)
            labels.append(Cause.PHOTON)
        h_ap = sum(occ[i] for i in range(n_comp) if ka[i] == kn)
        if h_ap > 0:
            weights.append(h_ap)
            labels.append(Cause.AFTERPULSE)
        if len(labels) == 1:
            cause = labels[0]
        elif math.isinf(h_ph) and Cause.PHOTON in labels:
            cause = Cause.PHOTON
        else:
            u = uni() * sum(weights)
            acc = 0.0
            cause = labels[-1]
            for w, lab in zip(weights, labels):
                acc += w
                if u < acc:
                    cause = lab
                    break

        if kn < allowed:
            # only reachable when blocked clicks are simulated
            n_blocked += 1
            for i in range(n_comp):
                occ[i] += tg * amps[i]
            k = kn + 1
            for i in range(n_comp):
                occ[i] *= decay[i]
            continue

        gates.append(kn)
        causes.append(int(cause))
        for i in range(n_comp):
            occ[i] += tg * amps[i]
        allowed = kn + n_dead
        k = kn + 1 if fill_blocked else allowed
        for i in range(n_comp):
            occ[i] *= decay[i] ** (k - kn)

    gate_arr = np.asarray(gates, dtype=np.int64)
    return SimRun(
        config=config,
        pulse_train=train,
        duration=n_gates / fg,
        seed=seed,
        times=gate_arr / fg,
        causes=np.asarray(causes, dtype=np.int8),
        gate_index=gate_arr,
        n_gates=n_gates,
        n_blocked=n_blocked,
        metadata={"generator": GENERATOR_ID, "engine": "gated"},
    )


def simulate_free_running(
    config: FreeRunningSpadConfig | SspdConfig,
    train: PulseTrainConfig,
    duration: float,
    seed: int,
    *,
    prior_clicks: Sequence[float] = (),
    max_events: int = DEFAULT_MAX_EVENTS,
) -> SimRun:
    """Continuous-time analogue of :func:`simulate_gated`.

    Dark clicks are Poisson at ``config.dark_rate``; each laser pulse is
    detected with probability ``1 - exp(-mu*eta)``; each click adds
    ``f(t - t_click)`` to the afterpulse intensity. ``prior_clicks`` are
    avalanche times (<= 0) that filled the traps before the run and are not
    recorded.
    """
    if not duration > 0:
        raise DomainError("duration must be positive")
    trap = config.trap_model
    fill_blocked = getattr(config, "blocked_clicks_fill_traps", False)
    p_ph = detection_prob(train.mean_photons, config.efficiency, 0.0)
    period = train.period
    expected = duration * (config.dark_rate + p_ph / period)
    expected *= 1.0 + trap.total_charge / max(1e-12, 1 - trap.total_charge)
    _check_cap(expected, max_events)

    uni = _Uniforms(seed)
    log_q_ph = math.log1p(-p_ph) if p_ph < 1 else -math.inf
    amps = list(trap.amplitudes)
    taus = list(trap.lifetimes)
    n_comp = len(amps)
    occ = [0.0] * n_comp
    for tc in prior_clicks:
        if tc > 0:
            raise DomainError("prior clicks must not lie after the run start")
        for i in range(n_comp):
            occ[i] += amps[i] * math.exp(tc / taus[i])
    dark = config.dark_rate
    deadtime = config.deadtime

    times: list[float] = []
    causes: list[int] = []
    n_blocked = 0
    t = 0.0
    allowed = 0.0
    next_pulse = 0
    while t < duration:
        best = math.inf
        cause = Cause.DARK
        if dark > 0:
            best = t + uni.exponential() / dark
        if p_ph > 0:
            tp = (next_pulse + _geometric(uni(), log_q_ph)) * period
            if tp < best:
                best, cause = tp, Cause.PHOTON
        for i in range(n_comp):
            mass = occ[i] * taus[i]
            if mass <= 0.0:
                continue
            e = uni.exponential()
            if e >= mass:
                continue
            ta = t - taus[i] * math.log1p(-e / mass)
            if ta < best:
                best, cause = ta, Cause.AFTERPULSE
        if best >= duration:
            break
        for i in range(n_comp):
            occ[i] *= math.exp(-(best - t) / taus[i])
        if best < allowed:
            n_blocked += 1
            for i in range(n_comp):
                occ[i] += amps[i]
            t = best
            next_pulse = math.floor(best / period + 1e-9) + 1
            continue
        times.append(best)
        causes.append(int(cause))
        for i in range(n_comp):
            occ[i] += amps[i]
        allowed = best + deadtime
        if fill_blocked:
            t_next = best
            next_pulse = math.floor(best / period + 1e-9) + 1
        else:
            t_next = allowed
            next_pulse = math.ceil(allowed / period - 1e-9)
        for i in range(n_comp):
            occ[i] *= math.exp(-(t_next - best) / taus[i])
        t = t_next

    return SimRun(
        config=config,
        pulse_train=train,
        duration=float(duration),
        seed=seed,
        times=np.asarray(times, dtype=float),
        causes=np.asarray(causes, dtype=np.int8),
        gate_index=np.full(len(times), -1, dtype=np.int64),
        n_blocked=n_blocked,
        metadata={"generator": GENERATOR_ID, "engine": "free-running"},
    )


def simulate(config, train: PulseTrainConfig, duration: float, seed: int, **kwargs) -> SimRun:
    """Dispatch on detector type; ``duration`` in ns."""
    if isinstance(config, GatedSpadConfig):
        n_gates = int(round(duration * config.gate_frequency))
        return simulate_gated(config, train, n_gates, seed, **kwargs)
    return simulate_free_running(config, train, duration, seed, **kwargs)


def apply_deadtime(times, tau_d: float) -> np.ndarray:
    """Non-paralyzable deadtime: keep an event iff it is at least ``tau_d``
    after the last kept event. Returns the kept indices' times."""
    t = np.asarray(times, dtype=float)
    if t.size and np.any(np.diff(t) <= 0):
        raise DomainError("event times must be strictly increasing")
    return t[deadtime_mask(t, tau_d)]


def deadtime_mask(times, tau_d: float) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    keep = np.zeros(t.size, dtype=bool)
    if tau_d <= 0:
        keep[:] = True
        return keep
    last = -math.inf
    # small relative slack so events sitting exactly on last + tau_d are kept
    slack = 1e-9 * max(1.0, tau_d)
    for i, ti in enumerate(t.tolist()):
        if ti >= last + tau_d - slack:
            keep[i] = True
            last = ti
    return keep
