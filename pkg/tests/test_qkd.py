from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spadlab.detector import DomainError, GatedSpadConfig, SspdConfig, TrapModel
from spadlab.qkd import (
    SCAN_COLUMNS,
    ConvergenceError,
    LinkConfig,
    binary_entropy,
    link_transmittance,
    max_distance,
    noise_prob_per_window,
    scan_distance,
    scan_to_csv,
    solve_operating_point,
)
from spadlab.reproduce import load_reference

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
# mpmath, 30 digits
H_011 = 0.49991595816452800
T_23DB = 0.0050118723362727


@pytest.fixture(scope="module")
def refs():
    loaded = load_reference(CONFIGS)
    link = loaded["rapid-50ns"].link
    return {k: rc.detector for k, rc in loaded.items()}, link


class TestEntropy:
    def test_examples(self):
        assert binary_entropy(0.5) == 1.0
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.11) == pytest.approx(H_011, rel=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            binary_entropy(1.5)

    @given(st.floats(0.0, 1.0))
    def test_symmetric(self, x):
        assert binary_entropy(x) == pytest.approx(binary_entropy(1 - x), abs=1e-12)


def test_transmittance_examples():
    link = LinkConfig()
    assert link_transmittance(35.0, link) == pytest.approx(0.1, rel=1e-12)
    assert link_transmittance(100.0, link) == pytest.approx(T_23DB, rel=1e-12)
    with pytest.raises(DomainError):
        link_transmittance(-1.0, link)


def test_noise_prob_examples():
    assert noise_prob_per_window(GatedSpadConfig(), 0.1) == pytest.approx(4.8e-7)
    assert noise_prob_per_window(SspdConfig(), 0.1) == pytest.approx(1e-9)
    assert noise_prob_per_window(SspdConfig(), 0.0) == 0.0


@pytest.mark.parametrize("kw", [dict(visibility=0.0), dict(ec_efficiency=0.9), dict(pulse_rate=0.0), dict(sifting_factor=1.5)])
def test_link_validation(kw):
    with pytest.raises(DomainError):
        LinkConfig(**kw)


def test_empty_trap_converges_immediately():
    pt = solve_operating_point(GatedSpadConfig(deadtime=50.0), LinkConfig(), 20.0)
    assert pt.P_ap_bar == 0.0
    assert pt.n_iterations == 1


def test_point_invariants(refs):
    dets, link = refs
    for det in dets.values():
        for d in (0.0, 25.0, 80.0, 150.0):
            p = solve_operating_point(det, link, d)
            assert 0 <= p.P_ap_bar < 1
            assert 0 <= p.qber <= 0.5
            assert p.detected_rate <= p.click_rate_pre_deadtime
            assert p.secure_rate >= 0
            assert p.delta_T_bar == pytest.approx(1e9 / p.detected_rate)


def test_fixed_point_independent_of_start(refs):
    dets, link = refs
    rng = np.random.default_rng(3)
    for det_id in ("rapid-50ns", "rapid-5us"):
        ref = solve_operating_point(dets[det_id], link, 10.0)
        for start in rng.uniform(0, 0.5, 5):
            alt = solve_operating_point(dets[det_id], link, 10.0, p_ap_start=float(start), damping=0.5)
            assert alt.P_ap_bar == pytest.approx(ref.P_ap_bar, abs=1e-10)


def test_iteration_budget_exhausted_raises(refs):
    dets, link = refs
    with pytest.raises(ConvergenceError):
        solve_operating_point(dets["rapid-50ns"], link, 10.0, max_iter=1)


def test_more_dark_counts_never_help(refs):
    dets, link = refs
    det = dets["rapid-5us"]
    noisier = replace(det, dark_prob=4 * det.dark_prob)
    for d in (20.0, 100.0, 180.0):
        assert solve_operating_point(noisier, link, d).secure_rate <= solve_operating_point(det, link, d).secure_rate


def test_visibility_helps(refs):
    dets, link = refs
    better = link.with_(visibility=min(1.0, link.visibility + 0.05))
    for d in (20.0, 100.0):
        assert (
            solve_operating_point(dets["rapid-50ns"], better, d).secure_rate
            >= solve_operating_point(dets["rapid-50ns"], link, d).secure_rate
        )


def test_removing_afterpulsing_never_hurts(refs):
    dets, link = refs
    for det_id in ("rapid-50ns", "rapid-5us"):
        det = dets[det_id]
        clean = replace(det, trap_model=TrapModel())
        for d in np.arange(0.0, 200.0, 20.0):
            assert solve_operating_point(clean, link, d).secure_rate >= solve_operating_point(det, link, d).secure_rate


def test_short_deadtime_wins_at_short_range(refs):
    dets, link = refs
    for d in np.arange(0.0, 40.1, 5.0):
        fast = solve_operating_point(dets["rapid-50ns"], link, d).secure_rate
        slow = solve_operating_point(dets["rapid-5us"], link, d).secure_rate
        assert fast >= slow


def test_free_running_near_5us(refs):
    dets, link = refs
    grid = np.arange(0.0, 401.0, 5.0)
    fr = max_distance(dets["free-running-30us"], link, grid)
    slow = max_distance(dets["rapid-5us"], link, grid)
    assert abs(fr - slow) <= 10.0


def test_scan_csv(refs):
    dets, link = refs
    scans = scan_distance({"sspd": dets["sspd"]}, link, [0.0, 50.0, 100.0])
    rows = scan_to_csv(scans).splitlines()
    assert rows[0].split(",") == SCAN_COLUMNS
    assert len(rows) == 4
    assert all(r.startswith("sspd,") for r in rows[1:])
    assert scans[0].max_distance == 100.0  # grid end is still secure
    with pytest.raises(DomainError):
        scan_distance({"sspd": dets["sspd"]}, link, [10.0, 0.0])


def test_secure_rate_vanishes_past_max_distance(refs):
    dets, link = refs
    d = max_distance(dets["rapid-50ns"], link, np.arange(0.0, 401.0, 5.0))
    assert solve_operating_point(dets["rapid-50ns"], link, d).secure_rate > 0
    assert solve_operating_point(dets["rapid-50ns"], link, d + 0.2).secure_rate == 0
    assert math.isfinite(d)


def test_mbps_at_20km(refs):
    # expected to fail with the calibrated link: the afterpulse floor that
    # ends the 50 ns curve near 130 km also caps its short-range secure fraction
    dets, link = refs
    assert solve_operating_point(dets["rapid-50ns"], link, 20.0).secure_rate >= 1e6
