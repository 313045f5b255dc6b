from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spadlab.detector import (
    DomainError,
    FreeRunningSpadConfig,
    GatedSpadConfig,
    PulseTrainConfig,
    SspdConfig,
    TrapModel,
    afterpulse_prob_between,
    detection_prob,
)
from spadlab.io import read_events_csv
from spadlab.montecarlo import (
    GENERATOR_ID,
    Cause,
    ConfigurationError,
    apply_deadtime,
    simulate,
    simulate_free_running,
    simulate_gated,
)

TRAIN = PulseTrainConfig(laser_frequency=10.0, mean_photons=0.1)
DARK_ONLY = PulseTrainConfig(laser_frequency=10.0, mean_photons=0.0)
TRAP = TrapModel((2.7e-3, 1.075e-4), (100.0, 1200.0))


def test_silent_detector_has_no_events():
    cfg = GatedSpadConfig(efficiency=0.0, dark_prob=0.0)
    assert len(simulate_gated(cfg, TRAIN, 10_000_000, 1)) == 0
    fr = FreeRunningSpadConfig(efficiency=0.0, dark_rate=0.0)
    assert len(simulate_free_running(fr, TRAIN, 1e7, 1)) == 0


def test_gated_dark_count_poisson():
    run = simulate_gated(GatedSpadConfig(), DARK_ONLY, 100_000_000, 3)
    assert abs(len(run) - 48) <= 5 * math.sqrt(48)
    assert run.count(Cause.DARK) == len(run)


def test_free_running_dark_count_poisson():
    cfg = FreeRunningSpadConfig(dark_rate=1e-6, deadtime=10.0)
    run = simulate_free_running(cfg, DARK_ONLY, 1e9, 4)
    assert abs(len(run) - 1000) <= 5 * math.sqrt(1000)


def test_determinism_and_seed_sensitivity():
    cfg = GatedSpadConfig(trap_model=TRAP)
    a = simulate_gated(cfg, TRAIN, 20_000_000, 9)
    b = simulate_gated(cfg, TRAIN, 20_000_000, 9)
    c = simulate_gated(cfg, TRAIN, 20_000_000, 10)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


def test_misaligned_laser_rejected():
    with pytest.raises(ConfigurationError):
        simulate_gated(GatedSpadConfig(), PulseTrainConfig(laser_frequency=7.0), 1000, 1)


def test_event_cap():
    with pytest.raises(OverflowError):
        simulate_gated(GatedSpadConfig(), PulseTrainConfig(mean_photons=100.0), 10**9, 1, max_events=1000)


def test_deadtime_respected_and_gate_alignment():
    cfg = GatedSpadConfig(trap_model=TRAP, deadtime=50.0)
    run = simulate_gated(cfg, PulseTrainConfig(mean_photons=5.0), 5_000_000, 2)
    assert np.all(np.diff(run.times) >= cfg.deadtime - 1e-9)
    assert np.allclose(run.times, run.gate_index / cfg.gate_frequency)
    assert run.n_blocked == 0  # blocked avalanches are not generated by default


def test_photon_clicks_only_on_pulse_gates():
    run = simulate_gated(GatedSpadConfig(dark_prob=0.0), PulseTrainConfig(mean_photons=1.0), 2_230_000, 5)
    ph = run.causes == Cause.PHOTON
    assert ph.any()
    assert np.all(run.gate_index[ph] % 223 == 0)


def test_geometric_intervals_without_traps():
    # a one-gate deadtime removes nothing, so gaps in gate index are geometric
    p = 2e-3
    cfg = GatedSpadConfig(dark_prob=p, deadtime=1 / 2.23)
    run = simulate_gated(cfg, DARK_ONLY, 60_000_000, 6)
    gaps = np.diff(run.gate_index)
    assert gaps.size > 100_000
    edges = np.array([1, 50, 100, 200, 300, 500, 800, 1200, 2000, np.inf])
    obs = np.histogram(gaps, edges)[0]
    cdf = lambda k: 1 - (1 - p) ** (k - 1)  # P(gap < k)
    probs = np.diff([cdf(e) if np.isfinite(e) else 1.0 for e in edges])
    _, pval = stats.chisquare(obs, probs * gaps.size)
    assert pval > 0.01


def test_forced_seed_afterpulse_mean():
    a, tau = 2e-4, 100.0
    cfg = FreeRunningSpadConfig(dark_rate=0.0, deadtime=1e-6, trap_model=TrapModel((a,), (tau,)))
    counts = [
        len(simulate_free_running(cfg, DARK_ONLY, 5000.0, seed, prior_clicks=(0.0,)))
        for seed in range(4000)
    ]
    m = a * tau
    mean, sem = np.mean(counts), np.std(counts) / math.sqrt(len(counts))
    # every afterpulse seeds its own: the expected total is m/(1-m)
    assert abs(mean - m / (1 - m)) < 3 * sem


def test_free_running_photon_probability():
    cfg = FreeRunningSpadConfig(dark_rate=0.0, deadtime=10.0)
    train = PulseTrainConfig(laser_frequency=10.0, mean_photons=1.0)
    run = simulate_free_running(cfg, train, 1e7, 8)
    p = detection_prob(1.0, 0.1, 0.0)
    n = run.n_pulses
    assert abs(len(run) - n * p) < 4 * math.sqrt(n * p * (1 - p))


def test_sspd_runs_without_traps():
    run = simulate(SspdConfig(dark_rate=1e-5), DARK_ONLY, 1e8, 1)
    assert run.count(Cause.AFTERPULSE) == 0
    assert abs(len(run) - 1000) < 5 * math.sqrt(1000)


def test_free_running_fraction_matches_closed_form():
    cfg = FreeRunningSpadConfig(dark_rate=1e-5, deadtime=10.0, trap_model=TrapModel((4e-4,), (100.0,)))
    run = simulate_free_running(cfg, DARK_ONLY, 1e10, 12)
    n = len(run)
    pred = afterpulse_prob_between(cfg.trap_model, cfg.deadtime, 1e10 / n)
    p = run.afterpulse_fraction
    assert abs(p - pred) < 3 * math.sqrt(p * (1 - p) / n / (1 - p))


def test_gated_and_free_running_agree_at_unit_duty():
    trap = TrapModel((5e-4, 2e-5), (80.0, 900.0))
    gated = GatedSpadConfig(gate_frequency=1.0, gate_width=1.0, dark_prob=2e-5, deadtime=20.0, trap_model=trap)
    free = FreeRunningSpadConfig(dark_rate=2e-5, deadtime=20.0, trap_model=trap)
    train = PulseTrainConfig(laser_frequency=1.0, mean_photons=0.0)
    rg = len(simulate_gated(gated, train, 2_000_000_000, 1))
    rf = len(simulate_free_running(free, train, 2e9, 2))
    assert rg == pytest.approx(rf, rel=0.02)


def test_blocked_clicks_fill_traps_flag_increases_afterpulsing():
    base = GatedSpadConfig(trap_model=TRAP, deadtime=200.0)
    train = PulseTrainConfig(mean_photons=2.0)
    off = simulate_gated(base, train, 50_000_000, 3)
    on = simulate_gated(replace(base, blocked_clicks_fill_traps=True), train, 50_000_000, 3)
    assert on.afterpulse_fraction > off.afterpulse_fraction
    assert on.n_blocked > 0
    assert np.all(np.diff(on.times) >= base.deadtime - 1e-9)


class TestApplyDeadtime:
    def test_examples(self):
        assert apply_deadtime([0.0, 5.0, 12.0], 10.0).tolist() == [0.0, 12.0]
        assert apply_deadtime([1.0, 2.0, 3.0], 0.0).tolist() == [1.0, 2.0, 3.0]

    def test_unsorted(self):
        with pytest.raises(DomainError):
            apply_deadtime([3.0, 1.0], 1.0)

    def test_non_paralyzable_rate(self):
        rng = np.random.default_rng(0)
        rate, tau = 0.02, 50.0
        t = np.cumsum(rng.exponential(1 / rate, 2_000_000))
        kept = apply_deadtime(t, tau)
        assert len(kept) / t[-1] == pytest.approx(rate / (1 + rate * tau), rel=0.02)


def test_csv_round_trip():
    cfg = GatedSpadConfig(trap_model=TRAP)
    run = simulate_gated(cfg, TRAIN, 20_000_000, 4)
    text = run.to_csv()
    assert text.splitlines()[0] == "time_ns,cause,gate_index"
    back = read_events_csv(text, config=cfg, pulse_train=TRAIN, duration=run.duration)
    assert np.allclose(back.times, run.times, atol=5e-4)
    assert np.array_equal(back.causes, run.causes)
    assert np.array_equal(back.gate_index, run.gate_index)


def test_csv_without_cause_column():
    back = read_events_csv("time_ns\n1.000\n250.500\n")
    assert back.times.tolist() == [1.0, 250.5]
    assert np.all(back.causes == -1)


def test_generator_identity_recorded():
    assert "PCG64" in GENERATOR_ID
