from __future__ import annotations

import math

import numpy as np
import pytest

from spadlab.calibration import calibrate_trap_model
from spadlab.detector import DomainError, TrapModel, afterpulse_prob_between
from spadlab.trapfit import FitError, fit_histogram, fit_multi_exponential, integrate_fit, model_values

T = np.arange(50.0, 5000.0, 50.0)
TWO = TrapModel((3e-4, 2e-5), (100.0, 1500.0))


def poisson_series(model, rng, n_seeds=2e6, width=50.0, t=T):
    """Binned counts for ``n_seeds`` seed clicks turned back into intensity."""
    lam = model_values(model, t, width) * width * n_seeds
    counts = rng.poisson(lam).astype(float)
    scale = 1.0 / (width * n_seeds)
    return t, counts * scale, np.sqrt(np.maximum(counts, 1.0)) * scale


def test_single_component_noiseless():
    m = TrapModel((4e-4,), (250.0,))
    y = model_values(m, T)
    res = fit_multi_exponential((T, y, 0.01 * y), 1)
    assert res.converged
    assert res.model.lifetimes[0] == pytest.approx(250.0, rel=1e-6)
    assert res.model.amplitudes[0] == pytest.approx(4e-4, rel=1e-6)


def test_two_component_noiseless_residual():
    y = model_values(TWO, T, 50.0)
    res = fit_multi_exponential((T, y, 0.01 * y), 2, bin_width=50.0)
    assert res.residual_norm < 1e-10
    assert np.allclose(res.model.lifetimes, TWO.lifetimes, rtol=1e-6)


def test_two_component_poisson():
    rng = np.random.default_rng(2024)
    res = fit_multi_exponential(poisson_series(TWO, rng), 2, bin_width=50.0)
    assert np.allclose(res.model.lifetimes, TWO.lifetimes, rtol=0.10)
    assert np.allclose(res.model.amplitudes, TWO.amplitudes, rtol=0.15)
    assert np.all(np.isfinite(res.covariance_diag))


def test_scale_equivariance():
    rng = np.random.default_rng(7)
    t, y, s = poisson_series(TWO, rng)
    a = fit_multi_exponential((t, y, s), 2, bin_width=50.0)
    b = fit_multi_exponential((t, y / 1000, s / 1000), 2, bin_width=50.0)
    assert np.allclose(b.model.lifetimes, a.model.lifetimes, rtol=1e-6)
    assert np.allclose(np.array(b.model.amplitudes) * 1000, a.model.amplitudes, rtol=1e-6)


def test_no_mode_collapse():
    rng = np.random.default_rng(99)
    ok = 0
    for _ in range(100):
        res = fit_multi_exponential(poisson_series(TWO, rng), 2, bin_width=50.0)
        short, long_ = res.model.lifetimes
        if long_ / short > 3 and abs(short - 100.0) < 30 and abs(long_ - 1500.0) < 450:
            ok += 1
    assert ok >= 95


def test_initial_guess_is_used():
    y = model_values(TWO, T, 50.0)
    res = fit_multi_exponential((T, y, 0.01 * y), 2, TrapModel((1e-4, 1e-5), (60.0, 2500.0)), bin_width=50.0)
    assert np.allclose(res.model.lifetimes, TWO.lifetimes, rtol=1e-6)
    with pytest.raises(DomainError):
        fit_multi_exponential((T, y, 0.01 * y), 2, TrapModel((1e-4,), (60.0,)))


def test_all_zero_raises():
    with pytest.raises(FitError):
        fit_multi_exponential((T, np.zeros_like(T), np.ones_like(T)), 2)


@pytest.mark.parametrize(
    "series, n",
    [
        ((T, model_values(TWO, T), np.ones_like(T)), 5),
        ((T[:4], np.ones(4), np.ones(4)), 2),
        ((T, -np.ones_like(T), np.ones_like(T)), 1),
        ((T, np.ones_like(T), np.zeros_like(T)), 1),
    ],
)
def test_domain_errors(series, n):
    with pytest.raises(DomainError):
        fit_multi_exponential(series, n)


def test_result_dict():
    y = model_values(TWO, T, 50.0)
    d = fit_multi_exponential((T, y, 0.01 * y), 2, bin_width=50.0).to_dict()
    assert {"components", "residual_norm", "converged", "n_iterations"} <= set(d)


def test_integrate_fit_delegates():
    assert integrate_fit(TWO, 10.0, 1000.0) == afterpulse_prob_between(TWO, 10.0, 1000.0)
    assert integrate_fit(TWO, 40.0, 40.0) == 0.0


def test_long_deadtime_suppresses_calibrated_model():
    trap = calibrate_trap_model()
    assert integrate_fit(trap, 5000.0, math.inf) < 5e-3


def test_fit_histogram_uses_valid_bins():
    class Hist:
        window_width = 50.0

        def series(self):
            y = model_values(TWO, T, 50.0)
            return T, y, 0.01 * y

    res = fit_histogram(Hist(), 2)
    assert np.allclose(res.model.amplitudes, TWO.amplitudes, rtol=1e-6)
