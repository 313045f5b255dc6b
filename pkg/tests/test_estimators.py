from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spadlab.detector import (
    DomainError,
    GatedSpadConfig,
    PulseTrainConfig,
    TrapModel,
    gated_afterpulse_sum,
)
from spadlab.estimators import (
    AfterpulseHistogram,
    classify_coincidences,
    correct_cascades,
    count_rate_vs_mu,
    estimate_afterpulse_probability,
    estimate_dark_prob,
    estimate_efficiency,
    afterpulse_histogram,
    normalize_and_correct,
    read_histogram_csv,
)
from spadlab.montecarlo import SimRun, simulate_gated

# 1e7 * (1 - (1 - 4.8e-7) * exp(-0.1)), mpmath at 30 digits
RATE_MU1_WITH_DARK = 951630.162860010840963
RATE_MU1_NO_DARK = 951625.8196404043

SLOW_TRAIN = PulseTrainConfig(laser_frequency=0.5, mean_photons=1.0)
TRAP = TrapModel((2.7e-3, 1.075e-4), (100.0, 1200.0))


def toy_run(times, duration=1000.0):
    times = np.asarray(times, dtype=float)
    return SimRun(
        config=None,
        pulse_train=PulseTrainConfig(),
        duration=duration,
        seed=None,
        times=times,
        causes=np.full(times.size, -1, dtype=np.int8),
        gate_index=np.full(times.size, -1, dtype=np.int64),
    )


class TestClassify:
    def test_hand_example(self):
        res = classify_coincidences(toy_run([0.0, 50.0, 100.04, 230.0, 399.97]), coincidence_window=0.1)
        assert res.n_photon_coincident == 3
        assert res.n_other == 2
        assert res.n_pulses == 10
        assert res.P_de == pytest.approx(0.3)

    def test_empty_run(self):
        res = classify_coincidences(toy_run([]))
        assert res.n_clicks == 0
        assert res.P_de == 0.0
        assert estimate_afterpulse_probability(res, 1e-6) == 0.0

    def test_window_narrower_than_gate(self):
        run = simulate_gated(GatedSpadConfig(), PulseTrainConfig(), 10_000, 1)
        with pytest.raises(DomainError):
            classify_coincidences(run, coincidence_window=0.05)


@pytest.fixture(scope="module")
def trap_free_run():
    cfg = GatedSpadConfig(dark_prob=2e-5)
    return simulate_gated(cfg, SLOW_TRAIN, 400_000_000, 21)


def test_efficiency_estimate(trap_free_run):
    res = classify_coincidences(trap_free_run)
    eta = estimate_efficiency(res, SLOW_TRAIN.mean_photons, 2e-5)
    n = res.n_pulses
    p = res.P_de
    # delta method: d eta / d P_de = 1 / (mu (1 - P_de))
    sigma = math.sqrt(p * (1 - p) / n) / (1 - p)
    assert abs(eta - 0.1) < 4 * sigma
    with pytest.raises(DomainError):
        estimate_efficiency(res, 0.0)


def test_dark_estimate(trap_free_run):
    est = estimate_dark_prob(trap_free_run, quiet_time=100.0)
    assert abs(est.P_dc - 2e-5) < 4 * est.sigma
    assert est.n_gates > 0.9 * trap_free_run.n_gates


def test_dark_estimate_needs_gated_run():
    from spadlab.montecarlo import ConfigurationError

    with pytest.raises(ConfigurationError):
        estimate_dark_prob(toy_run([1.0]))


def test_trap_free_histogram_is_flat_zero(trap_free_run):
    with pytest.warns(UserWarning):
        hist = afterpulse_histogram(trap_free_run, 50.0, 1000.0)
    t, y, s = hist.series()
    assert len(t) == 19  # bin 0 starts inside the deadtime
    z = y / s
    # clipped-at-zero noise: no bin should sit far above zero
    assert np.all(z < 4)
    assert hist.n_seed_clicks == classify_coincidences(trap_free_run).n_photon_coincident


def test_histogram_total_matches_gate_sum():
    cfg = GatedSpadConfig(dark_prob=4.8e-7, trap_model=TRAP)
    run = simulate_gated(cfg, SLOW_TRAIN, 200_000_000, 5)
    hist = afterpulse_histogram(run, 50.0, 1000.0)
    total = float(hist.raw_prob[hist.valid].sum())
    expect = gated_afterpulse_sum(TRAP, cfg, 50.0, 1000.0)
    sigma = math.sqrt(float(hist.bin_counts[hist.valid].sum())) / hist.n_seed_clicks
    assert abs(total - expect) < 3 * sigma + 0.02 * expect


def test_histogram_range_must_fit_period():
    run = simulate_gated(GatedSpadConfig(), PulseTrainConfig(), 10_000, 1)
    with pytest.raises(DomainError):
        afterpulse_histogram(run, 50.0, 1000.0)


def test_histogram_csv_round_trip():
    cfg = GatedSpadConfig(dark_prob=4.8e-7, trap_model=TRAP)
    run = simulate_gated(cfg, SLOW_TRAIN, 50_000_000, 8)
    hist = afterpulse_histogram(run, 50.0, 1000.0)
    text = hist.to_csv()
    assert text.splitlines()[0] == "bin_start_ns,raw_count,baseline,corrected_intensity_per_ns"
    t, y, sigma, width = read_histogram_csv(text)
    t0, y0, s0 = hist.series()
    assert width == 50.0
    assert np.array_equal(t, t0)
    assert np.allclose(y, y0, rtol=1e-8)
    # sigma is reconstructed up to the per-bin scale; same order of magnitude
    good = y0 > 0
    assert np.allclose(sigma[good], s0[good], rtol=0.5)


class TestCascades:
    def test_two_bin_toy(self):
        p = correct_cascades([0.1, 0.02])
        assert p[0] == 0.1
        assert p[1] == pytest.approx(0.02 / 1.1, rel=1e-12)

    def test_three_bin_closed_form(self):
        p = correct_cascades([0.1, 0.02, 0.01])
        p1 = 0.02 / 1.1
        assert p[2] == pytest.approx((0.01 - p1**2) / 1.1, rel=1e-12)

    def test_all_zero(self):
        assert np.all(correct_cascades(np.zeros(20)) == 0.0)

    def test_single_bin_unchanged(self):
        assert correct_cascades([0.3]).tolist() == [0.3]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 0.01), min_size=1, max_size=30))
    def test_is_fixed_point(self, raw):
        p = correct_cascades(raw)
        # convolving the corrected values back must reproduce the raw input
        rebuilt = p.copy()
        for j in range(1, len(p)):
            rebuilt[j] += np.dot(p[:j], p[j:0:-1])
        ok = p > 0
        assert np.allclose(rebuilt[ok], np.asarray(raw)[ok], rtol=1e-9, atol=1e-15)
        assert np.all(p <= np.asarray(raw) + 1e-15)


class TestNormalize:
    def test_single_nonzero_bin(self):
        # a single nonzero bin is untouched by the correction: 5.575e-4 / 11.15 ns
        out = normalize_and_correct(np.array([0.0, 5.575e-4]), 1.0, 1.0, 11.15)
        assert out[1] == pytest.approx(5.0e-5, rel=1e-12)

    def test_duty_scaling(self):
        a = normalize_and_correct(np.array([1e-4]), 0.1, 2.23, 50.0)
        assert a[0] == pytest.approx(1e-4 / (50.0 * 0.223))

    def test_bad_duty(self):
        with pytest.raises(DomainError):
            normalize_and_correct(np.array([1e-4]), 1.0, 2.0)

    def test_accepts_histogram_object(self):
        h = AfterpulseHistogram(
            window_width=10.0, range=20.0, bin_counts=np.array([0, 0]), n_seed_clicks=1,
            dark_baseline=np.zeros(2), raw_prob=np.array([0.0, 2e-3]), corrected_intensity=np.zeros(2),
            sigma=np.ones(2), valid=np.array([False, True]),
        )
        assert normalize_and_correct(h, 1.0, 1.0)[1] == pytest.approx(2e-4)


class TestCountRate:
    def test_examples(self):
        train = PulseTrainConfig()
        ((_, r),) = count_rate_vs_mu(GatedSpadConfig(), train, [1.0])
        assert r == pytest.approx(RATE_MU1_WITH_DARK, rel=1e-12)
        ((_, r0),) = count_rate_vs_mu(GatedSpadConfig(dark_prob=0.0), train, [1.0])
        assert r0 == pytest.approx(RATE_MU1_NO_DARK, rel=1e-12)
        assert count_rate_vs_mu(GatedSpadConfig(dark_prob=0.0), train, [0.0])[0][1] == 0.0

    def test_saturation_and_monotone(self):
        rows = count_rate_vs_mu(GatedSpadConfig(), PulseTrainConfig(), np.geomspace(0.01, 1000, 26))
        rates = [r for _, r in rows]
        assert np.all(np.diff(rates) >= 0)
        assert rates[-1] == pytest.approx(1e7, rel=1e-12)

    def test_negative_mu(self):
        with pytest.raises(DomainError):
            count_rate_vs_mu(GatedSpadConfig(), PulseTrainConfig(), [-1.0])
