"""Multi-exponential detrapping fits.

Fits ``f(t) = sum a_i exp(-t/tau_i)`` to an afterpulse-intensity series by
weighted nonlinear least squares in log-parameters (so amplitudes and
lifetimes stay positive), using a damped Gauss-Newton iteration.

Damping schedule: lambda starts at 1e-3, is multiplied by 10 on a rejected
step and by 0.3 on an accepted one; iteration stops when the relative step
falls below 1e-10 or after 500 iterations. Without an initial model, trial
lifetime sets are drawn from a log-spaced grid between the first bin and
ten times the data range, amplitudes are solved linearly for each set
(variable projection) and the best finished fit is kept.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .detector import DomainError, TrapModel, afterpulse_prob_between

MAX_ITER = 500
STEP_TOL = 1e-10
GRAD_TOL = 1e-6


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    model: TrapModel
    residual_norm: float
    covariance_diag: np.ndarray
    n_iterations: int
    converged: bool
    chi2: float = float("nan")

    def to_dict(self) -> dict:
        n = self.model.n_components
        var = np.asarray(self.covariance_diag, dtype=float)
        return {
            "components": [
                {
                    "amplitude_per_ns": a,
                    "lifetime_ns": tau,
                    "amplitude_sigma": math.sqrt(var[i]) if np.isfinite(var[i]) else None,
                    "lifetime_sigma": math.sqrt(var[n + i]) if np.isfinite(var[n + i]) else None,
                }
                for i, (a, tau) in enumerate(self.model.components)
            ],
            "residual_norm": self.residual_norm,
            "chi2": self.chi2,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
        }


def _basis(t, tau, width):
    """Columns exp(-t/tau) (point samples) or their bin averages, and
    tau * d/dtau of each."""
    t = t[:, None]
    tau = np.asarray(tau, dtype=float)[None, :]
    e0 = np.exp(-t / tau)
    if width is None:
        return e0, (t / tau) * e0
    e1 = np.exp(-(t + width) / tau)
    g = (tau / width) * (e0 - e1)
    dg = g + (t * e0 - (t + width) * e1) / width
    return g, dg


def model_values(model: TrapModel, t, bin_width: float | None = None) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if model.n_components == 0:
        return np.zeros_like(t)
    g, _ = _basis(t, model.lifetimes, bin_width)
    return g @ np.asarray(model.amplitudes)


def _levenberg_marquardt(theta, t, y, w, n, width):
    """Minimize sum(w^2 (m - y)^2) over log-parameters ``theta``."""

    def resid_jac(th):
        a = np.exp(th[:n])
        tau = np.exp(th[n:])
        g, dg = _basis(t, tau, width)
        m = g @ a
        r = w * (m - y)
        jac = np.empty((len(t), 2 * n))
        jac[:, :n] = w[:, None] * g * a
        jac[:, n:] = w[:, None] * dg * a
        return r, jac

    lam = 1e-3
    r, jac = resid_jac(theta)
    cost = float(r @ r)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        jtj = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        try:
            step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        trial = theta + step
        r_new, jac_new = resid_jac(trial)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new <= cost:
            theta, r, jac, cost = trial, r_new, jac_new, cost_new
            lam *= 0.3
            if np.linalg.norm(step) < STEP_TOL * (1.0 + np.linalg.norm(theta)):
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e16:
                # no descent direction left: already at the minimum to precision
                converged = True
                break
    grad = jac.T @ r
    scale = np.linalg.norm(jac) * math.sqrt(max(cost, 1e-300)) + 1e-300
    # at a rounding-level residual the gradient direction is noise, so skip the check
    floor = 1e-20 * float((w * y) @ (w * y))
    if np.linalg.norm(grad) / scale > GRAD_TOL and cost > floor:
        converged = False
    return theta, cost, jac, it, converged


def _initial_lifetimes(t, n, width):
    lo = max(float(np.min(t[t > 0])) if np.any(t > 0) else 0.0, width or 0.0, 1e-3)
    span = float(np.max(t)) + (width or 0.0)
    hi = max(10.0 * span, 2 * lo)
    grid = np.geomspace(lo, hi, 8)
    return [np.array(c) for c in itertools.combinations(grid, n)]


def fit_multi_exponential(
    series,
    n_components: int = 2,
    initial: TrapModel | None = None,
    *,
    bin_width: float | None = None,
) -> FitResult:
    """Fit a sum of ``n_components`` exponentials.

    Parameters
    ----------
    series : (t, intensity, sigma)
        Arrays of equal length; ``t`` in ns is a sample time, or the bin
        start when ``bin_width`` is given (the model is then averaged over
        each bin).
    n_components : int
        1 to 4.
    initial : TrapModel, optional
        Starting point; disables the multi-start search.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration budget ran out; the model
        is then the best one reached.
    """
    t, y, sigma = (np.asarray(x, dtype=float) for x in series)
    if not (1 <= n_components <= 4):
        raise DomainError("n_components must be between 1 and 4")
    if not (t.shape == y.shape == sigma.shape):
        raise DomainError("t, intensity and sigma must have equal length")
    if len(t) < 2 * n_components + 1:
        raise DomainError(f"need at least {2 * n_components + 1} points")
    if np.any(t < 0):
        raise DomainError("times must be non-negative")
    if np.any(y < 0):
        raise DomainError("intensities must be non-negative")
    if not np.any(y > 0):
        raise FitError("all intensities are zero; nothing to fit")
    if np.any(~(sigma > 0)):
        raise DomainError("sigma must be positive")
    w = 1.0 / sigma
    n = n_components

    if initial is not None:
        if initial.n_components != n:
            raise DomainError("initial model has the wrong number of components")
        starts = [np.concatenate((np.log(initial.amplitudes), np.log(initial.lifetimes)))]
    else:
        starts = []
        for taus in _initial_lifetimes(t, n, bin_width):
            g, _ = _basis(t, taus, bin_width)
            amps, _ = nnls(w[:, None] * g, w * y)
            if np.any(amps <= 0):
                continue
            starts.append(np.concatenate((np.log(amps), np.log(taus))))
        if not starts:
            # fall back to spreading the mean level over the trial lifetimes
            taus = _initial_lifetimes(t, n, bin_width)[0]
            amps = np.full(n, max(float(np.mean(y)), 1e-300) / n)
            starts.append(np.concatenate((np.log(amps), np.log(taus))))

    best = None
    for theta0 in starts:
        # trial steps may probe huge lifetimes; overflow there just means a rejected step
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            theta, cost, jac, it, conv = _levenberg_marquardt(theta0, t, y, w, n, bin_width)
        try:
            model = TrapModel(tuple(np.exp(theta[:n])), tuple(np.exp(theta[n:])))
        except DomainError:
            continue
        if best is None or cost < best[1]:
            best = (theta, cost, jac, it, conv, model)
    if best is None:
        raise FitError("no start produced a physical trap model")
    theta, cost, jac, it, conv, model = best

    # canonical ordering by lifetime for the covariance too
    order = np.argsort(theta[n:])
    idx = np.concatenate((order, n + order))
    jac = jac[:, idx]
    theta = theta[idx]
    try:
        cov_log = np.linalg.pinv(jac.T @ jac)
        var_log = np.diag(cov_log)
    except np.linalg.LinAlgError:
        var_log = np.full(2 * n, np.inf)
    cov_diag = np.exp(2 * theta) * var_log

    m = model_values(model, t, bin_width)
    pos = (y > 0) & (m > 0)
    lw = (y[pos] * w[pos]) ** 2
    lr = np.log(y[pos]) - np.log(m[pos])
    residual_norm = float(math.sqrt(np.sum(lw * lr**2) / np.sum(lw))) if pos.any() else float("nan")
    return FitResult(
        model=model,
        residual_norm=residual_norm,
        covariance_diag=cov_diag,
        n_iterations=it,
        converged=conv,
        chi2=cost,
    )


def fit_histogram(hist, n_components: int = 2, initial: TrapModel | None = None) -> FitResult:
    """Fit the valid bins of an :class:`~spadlab.estimators.AfterpulseHistogram`."""
    t, y, s = hist.series()
    return fit_multi_exponential((t, y, s), n_components, initial, bin_width=hist.window_width)


def integrate_fit(model: TrapModel, tau_d: float, delta_t: float) -> float:
    """Average afterpulse probability between ``tau_d`` and ``delta_t``."""
    return afterpulse_prob_between(model, tau_d, delta_t)
