"""Characterization pipeline on click streams.

Everything here works from click timing alone (ground-truth cause labels
are never read), so it applies equally to simulated runs and to recorded
hardware timestamps loaded with :func:`spadlab.io.read_events_csv`.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .detector import (
    DomainError,
    GatedSpadConfig,
    PulseTrainConfig,
    detection_prob,
)
from .montecarlo import Cause, ConfigurationError, SimRun, simulate


class ConvergenceError(RuntimeError):
    """An iterative procedure failed to reach its fixed point."""


@dataclass(frozen=True)
class CoincidenceResult:
    n_photon_coincident: int
    n_other: int
    n_gates: int
    n_pulses: int
    n_off_gates: int
    P_de: float
    P_dc_effective: float

    @property
    def n_clicks(self) -> int:
        return self.n_photon_coincident + self.n_other


@dataclass(frozen=True)
class DarkEstimate:
    """Dark count probability per gate from afterpulse-free ("quiet") gates."""

    P_dc: float
    sigma: float
    n_counts: int
    n_gates: int


def _run_gate_info(run: SimRun):
    cfg = run.config
    if isinstance(cfg, GatedSpadConfig):
        return cfg.gate_frequency, run.n_gates, max(1, int(math.ceil(cfg.deadtime * cfg.gate_frequency - 1e-9)))
    return None, None, None


def _coincident_mask(run: SimRun, window: float) -> np.ndarray:
    if run.pulse_train is None:
        raise ConfigurationError("laser period unknown: run has no pulse train")
    period = run.pulse_train.period
    phase = np.remainder(run.times, period)
    dist = np.minimum(phase, period - phase)
    return dist <= 0.5 * window + 1e-6


def classify_coincidences(run: SimRun, coincidence_window: float | None = None) -> CoincidenceResult:
    """Split clicks into laser-coincident ones and everything else.

    A click is photon-coincident when its time modulo the laser period lies
    within ``coincidence_window`` centred on the pulse arrival. Gated runs
    count only live (not dead-timed) off-pulse gates in ``n_off_gates``;
    free-running runs use slots of one coincidence window.
    """
    if run.pulse_train is None:
        raise ConfigurationError("laser period unknown: run has no pulse train")
    window = coincidence_window if coincidence_window is not None else run.pulse_train.detection_window
    cfg = run.config
    if isinstance(cfg, GatedSpadConfig) and window < cfg.gate_width - 1e-12:
        raise DomainError("coincidence window narrower than the gate")
    coinc = _coincident_mask(run, window)
    n_coinc = int(np.count_nonzero(coinc))
    n_other = len(run) - n_coinc
    n_pulses = run.n_pulses
    fg, n_gates, n_dead = _run_gate_info(run)
    if fg is not None:
        blind = 0
        if len(run):
            k = run.gate_index if np.all(run.gate_index >= 0) else np.round(run.times * fg).astype(np.int64)
            blind = int(np.minimum(n_dead - 1, n_gates - 1 - k).clip(min=0).sum())
        n_off = n_gates - n_pulses - blind
    else:
        n_gates = int(run.duration / window)
        n_off = n_gates - n_pulses
    n_off = max(n_off, 1)
    return CoincidenceResult(
        n_photon_coincident=n_coinc,
        n_other=n_other,
        n_gates=int(n_gates),
        n_pulses=n_pulses,
        n_off_gates=int(n_off),
        P_de=n_coinc / n_pulses if n_pulses else 0.0,
        P_dc_effective=n_other / n_off,
    )


def estimate_efficiency(result: CoincidenceResult, mu: float, dark_prob: float | None = None) -> float:
    """Efficiency from coincidence counts.

    ``dark_prob`` defaults to the off-coincidence click probability. Unlike
    :func:`spadlab.detector.efficiency_from_counts` this does not reject
    ``P_de < P_dc``: statistical noise on an all-dark stream may give a
    slightly negative estimate.
    """
    if not mu > 0:
        raise DomainError("mu must be positive")
    p_dc = result.P_dc_effective if dark_prob is None else dark_prob
    return (math.log1p(-p_dc) - math.log1p(-result.P_de)) / mu


def estimate_dark_prob(
    run: SimRun,
    quiet_time: float = 10_000.0,
    coincidence_window: float | None = None,
) -> DarkEstimate:
    """Dark count probability per gate from gates at least ``quiet_time`` ns
    after the preceding click, where the afterpulse hazard has died out.

    The run start counts as a click since earlier history is unknown. Gates
    that carry a laser pulse are excluded.
    """
    fg, n_gates, _ = _run_gate_info(run)
    if fg is None:
        raise ConfigurationError("dark probability per gate needs a gated run")
    window = coincidence_window if coincidence_window is not None else run.pulse_train.detection_window
    per_pulse = int(round(fg * run.pulse_train.period))
    q = int(math.ceil(quiet_time * fg))
    k = np.round(run.times * fg).astype(np.int64)
    coinc = _coincident_mask(run, window)
    prev_all = np.concatenate(([0], k))
    prev = prev_all[:-1]
    # quiet stretch between previous click and this one: gates prev+q .. k
    starts = prev_all + q
    ends = np.concatenate((k, [n_gates - 1]))
    lengths = np.clip(ends - starts + 1, 0, None)

    def pulses_upto(x):
        return np.where(x >= 0, x // per_pulse + 1, 0)

    pulse_gates = np.where(lengths > 0, pulses_upto(ends) - pulses_upto(starts - 1), 0)
    n_quiet = int((lengths - pulse_gates).sum())
    quiet_click = (k >= prev + q) & ~coinc
    n = int(np.count_nonzero(quiet_click))
    if n_quiet <= 0:
        raise DomainError("no quiet gates; shorten quiet_time or lengthen the run")
    p = n / n_quiet
    return DarkEstimate(P_dc=p, sigma=math.sqrt(max(n, 1)) / n_quiet, n_counts=n, n_gates=n_quiet)


def estimate_afterpulse_probability(result: CoincidenceResult, dark_prob: float) -> float:
    """Afterpulse clicks over all clicks, with afterpulses counted as the
    off-coincidence clicks in excess of the dark expectation."""
    if result.n_clicks == 0:
        return 0.0
    n_ap = result.n_other - dark_prob * result.n_off_gates
    return max(n_ap, 0.0) / result.n_clicks


@dataclass
class AfterpulseHistogram:
    """Coincidence histogram of clicks following photon-detected seeds.

    Attributes
    ----------
    window_width, range : float
        Bin width and covered delay range, ns.
    bin_counts : ndarray
        Raw click counts per delay bin, summed over seeds.
    n_seed_clicks : int
    dark_baseline : ndarray
        Expected counts per bin from the pre-pulse estimate.
    raw_prob : ndarray
        Baseline-subtracted afterpulse probability per seed and bin.
    corrected_intensity : ndarray
        Normalized and iteratively corrected intensity, ns^-1.
    sigma : ndarray
        Counting uncertainty of ``corrected_intensity``.
    valid : ndarray of bool
        False for bins that start inside the deadtime.
    n_clipped : int
        Bins where subtraction went negative and were clipped to zero.
    """

    window_width: float
    range: float
    bin_counts: np.ndarray
    n_seed_clicks: int
    dark_baseline: np.ndarray
    raw_prob: np.ndarray
    corrected_intensity: np.ndarray
    sigma: np.ndarray
    valid: np.ndarray
    n_clipped: int = 0

    @property
    def n_bins(self) -> int:
        return len(self.bin_counts)

    @property
    def bin_starts(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.window_width

    def series(self):
        """(t, intensity, sigma) of the valid bins, ready for fitting."""
        m = self.valid
        return self.bin_starts[m], self.corrected_intensity[m], self.sigma[m]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start_ns", "raw_count", "baseline", "corrected_intensity_per_ns"])
        for t, n, b, y, ok in zip(self.bin_starts, self.bin_counts, self.dark_baseline,
                                  self.corrected_intensity, self.valid):
            w.writerow([f"{t:g}", str(int(n)), f"{b:.6g}", f"{y:.9e}" if ok else ""])
        text = buf.getvalue()
        if path is not None:
            from .io import atomic_write_text

            atomic_write_text(path, text)
        return text


def read_histogram_csv(path_or_text):
    """Parse histogram CSV into fit-ready ``(t, intensity, sigma, width)``.

    Empty intensity cells (bins inside the deadtime) are skipped. The CSV
    carries no seed count, so sigma is reconstructed from counting
    statistics up to the common per-bin scale factor.
    """
    from .io import read_text_or_path

    text = read_text_or_path(path_or_text)
    rows = list(csv.DictReader(text.splitlines()))
    t = np.array([float(r["bin_start_ns"]) for r in rows])
    n = np.array([float(r["raw_count"]) for r in rows])
    b = np.array([float(r["baseline"]) for r in rows])
    ok = np.array([r["corrected_intensity_per_ns"].strip() != "" for r in rows])
    y = np.array([float(r["corrected_intensity_per_ns"]) if k else np.nan for r, k in zip(rows, ok)])
    width = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    excess = n - b
    good = ok & (excess > 0) & (y > 0)
    scale = float(np.median(y[good] / excess[good])) if good.any() else 1.0
    sigma = scale * np.sqrt(n + np.maximum(b, 1.0))
    return t[ok], y[ok], sigma[ok], width


def afterpulse_histogram(
    run: SimRun,
    window: float = 50.0,
    range_: float = 1000.0,
    coincidence_window: float | None = None,
) -> AfterpulseHistogram:
    """Histogram of delays from photon-coincident seed clicks to later clicks.

    Bin j collects clicks at delays in ``[j*window, (j+1)*window)`` after a
    seed. The constant dark contribution is estimated from the clicks in
    the half laser period preceding each seed's pulse and subtracted, then
    the per-seed probabilities are normalized and corrected with
    :func:`normalize_and_correct`.
    """
    if run.pulse_train is None:
        raise ConfigurationError("laser period unknown: run has no pulse train")
    period = run.pulse_train.period
    if period <= range_:
        raise DomainError(f"laser period {period} ns must exceed the histogram range {range_} ns")
    n_bins = int(round(range_ / window))
    cw = coincidence_window if coincidence_window is not None else run.pulse_train.detection_window
    coinc = _coincident_mask(run, cw)
    seeds = np.flatnonzero(coinc)
    times = run.times
    counts = np.zeros(n_bins, dtype=np.int64)
    n_pre = 0
    half = 0.5 * period
    edges = np.arange(n_bins + 1) * window
    for chunk in np.array_split(seeds, max(1, len(seeds) // 100_000 + 1)):
        if chunk.size == 0:
            continue
        ts = times[chunk]
        idx = np.searchsorted(times, ts[:, None] + edges[None, :], side="left")
        idx[:, 0] = chunk + 1  # exclude the seed itself
        counts += np.diff(idx, axis=1).sum(axis=0)
        lo = np.searchsorted(times, ts - half, side="left")
        n_pre += int((chunk - lo).sum())
    n_seeds = int(seeds.size)
    base_per_bin = n_pre * window / half
    baseline = np.full(n_bins, base_per_bin)
    cfg = run.config
    if isinstance(cfg, GatedSpadConfig):
        tg, fg = cfg.gate_width, cfg.gate_frequency
    else:
        tg, fg = 1.0, 1.0
    deadtime = getattr(cfg, "deadtime", 0.0) if cfg is not None else 0.0
    valid = edges[:-1] >= deadtime - 1e-9
    if n_seeds == 0:
        raw = np.zeros(n_bins)
        n_clipped = 0
        sigma_p = np.full(n_bins, np.inf)
    else:
        raw = (counts - baseline) / n_seeds
        n_clipped = int(np.count_nonzero(raw < 0))
        if n_clipped:
            warnings.warn(f"{n_clipped} histogram bins below the dark baseline clipped to zero")
        raw = np.clip(raw, 0.0, None)
        var_base = n_pre * (window / half) ** 2
        sigma_p = np.sqrt(counts + var_base) / n_seeds
    corrected = normalize_and_correct(raw, tg, fg, window)
    sigma = sigma_p / (window * tg * fg)
    return AfterpulseHistogram(
        window_width=window,
        range=range_,
        bin_counts=counts,
        n_seed_clicks=n_seeds,
        dark_baseline=baseline,
        raw_prob=raw,
        corrected_intensity=corrected,
        sigma=sigma,
        valid=valid,
        n_clipped=n_clipped,
    )


def correct_cascades(raw, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Remove afterpulses of afterpulses from per-bin probabilities.

    Solves ``p_j = raw_j - sum_{k<j} p_k * p_{j-k}`` for the fixed point by
    repeated substitution, clipping at zero.
    """
    raw = np.asarray(raw, dtype=float)
    p = raw.copy()
    n = len(p)
    for _ in range(max_iter):
        conv = np.zeros(n)
        for j in range(1, n):
            conv[j] = np.dot(p[:j], p[j:0:-1])
        new = np.clip(raw - conv, 0.0, None)
        if np.max(np.abs(new - p), initial=0.0) < tol:
            return new
        p = new
    raise ConvergenceError("afterpulse correction did not converge; afterpulsing too large")


def normalize_and_correct(hist, t_g: float, f_g: float, window: float = 50.0) -> np.ndarray:
    """Per-bin afterpulse intensity in ns^-1 of armed time.

    Each bin's per-seed probability is cascade-corrected with
    :func:`correct_cascades`, then divided by ``window * t_g * f_g``.
    ``hist`` is an :class:`AfterpulseHistogram` or an array of per-seed
    bin probabilities.
    """
    duty = t_g * f_g
    if not (0 < duty <= 1 + 1e-12):
        raise DomainError(f"duty cycle {duty} outside (0, 1]")
    if isinstance(hist, AfterpulseHistogram):
        raw = hist.raw_prob
        window = hist.window_width
    else:
        raw = np.asarray(hist, dtype=float)
    return correct_cascades(raw) / (window * duty)


def count_rate_vs_mu(config, train: PulseTrainConfig, mu_grid) -> list[tuple[float, float]]:
    """Analytic photon-coincident count rate (Hz) versus mean photon number.

    ``rate = laser_frequency * (1 - (1 - P_dc) exp(-mu*eta))`` with the dark
    probability of one detection window; saturates at the laser frequency.
    """
    if isinstance(config, GatedSpadConfig):
        p_dc = config.dark_prob
    else:
        p_dc = config.dark_rate * train.detection_window
    out = []
    for mu in mu_grid:
        if mu < 0:
            raise DomainError("mu must be non-negative")
        out.append((float(mu), train.laser_frequency * 1e6 * detection_prob(mu, config.efficiency, p_dc)))
    return out


def simulated_count_rate(config, train: PulseTrainConfig, duration: float, seed: int) -> tuple[float, float]:
    """Monte Carlo photon-coincident count rate and its counting sigma (Hz)."""
    run = simulate(config, train, duration, seed)
    res = classify_coincidences(run)
    seconds = run.duration * 1e-9
    n = res.n_photon_coincident
    return n / seconds, math.sqrt(max(n, 1)) / seconds
