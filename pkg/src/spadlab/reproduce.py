"""Regenerate every reference dataset in one deterministic pass.

Outputs (all in ``out_dir``):

``characterization.json``
    Efficiency, dark count and afterpulse estimates from 1e8 simulated gates
    at 2.23 GHz with a 10 MHz laser.
``count_rate_vs_mu.csv``
    Analytic and simulated photon count rate against mean photon number.
``calibration.json``
    The reference trap model and how it meets its two anchors.
``afterpulse_histogram.csv`` / ``trap_fit.json``
    50 ns / 1 us afterpulse histogram at a 500 kHz laser and its
    two-component fit.
``eq3_check.csv``
    Closed-form afterpulse probability against simulated ground truth on
    20 randomized free-running detectors.
``keyrate_curves.csv`` / ``max_distances.json``
    COW key rate against distance for the four reference detectors.

Each stage draws its seed from the root seed with
:func:`spadlab.config.stage_seed`; set ``SPADLAB_THREADS`` to run the
independent simulations in parallel processes (results do not depend on it).
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .calibration import (
    AFTERPULSE_FRACTION,
    CHARACTERIZATION_DETECTOR,
    CHARACTERIZATION_TRAIN,
    INTENSITY_AT_BIN,
    INTENSITY_BIN,
)
from .detector import (
    FreeRunningSpadConfig,
    GatedSpadConfig,
    PulseTrainConfig,
    TrapModel,
    afterpulse_prob_between,
    gated_afterpulse_sum,
)
from .estimators import (
    afterpulse_histogram,
    classify_coincidences,
    count_rate_vs_mu,
    estimate_afterpulse_probability,
    estimate_dark_prob,
    estimate_efficiency,
    simulated_count_rate,
)
from .io import atomic_write_text, sha256_text
from .montecarlo import simulate_free_running, simulate_gated
from .qkd import scan_distance, scan_to_csv
from .trapfit import fit_histogram, model_values

REFERENCE_IDS = ("rapid-50ns", "rapid-5us", "free-running-30us", "sspd")
A1_GATES = 100_000_000
A4_GATES = 892_000_000_000  # 2e8 pulses of a 500 kHz laser
A4_MU = 0.3
A5_CONFIGS = 20
A5_CLICKS = 200_000
MU_GRID = tuple(float(x) for x in np.round(np.geomspace(0.01, 1000.0, 26), 10))


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("SPADLAB_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    """Ordered map, in worker processes when SPADLAB_THREADS > 1."""
    items = list(items)
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def load_reference(config_dir) -> dict:
    """Reference RunConfigs keyed by detector id."""
    config_dir = Path(config_dir)
    out = {}
    for det_id in REFERENCE_IDS:
        path = config_dir / f"{det_id}.toml"
        out[det_id] = cfgmod.load(path)
    return out


def characterize_run(run, mu: float, quiet_time: float = 10_000.0, window: float = 50.0, range_: float = 1000.0) -> dict:
    """Timing-only estimates for a gated run, plus ground truth when the
    run carries cause labels."""
    res = classify_coincidences(run)
    dark = estimate_dark_prob(run, quiet_time)
    out = {
        "n_gates": res.n_gates,
        "n_pulses": res.n_pulses,
        "n_clicks": res.n_clicks,
        "n_photon_coincident": res.n_photon_coincident,
        "n_off_coincidence": res.n_other,
        "P_de": res.P_de,
        "P_dc_off_coincidence": res.P_dc_effective,
        "P_dc_quiet": dark.P_dc,
        "P_dc_quiet_sigma": dark.sigma,
        "P_dc_quiet_counts": dark.n_counts,
        "efficiency": estimate_efficiency(res, mu, dark.P_dc),
        "afterpulse_probability": estimate_afterpulse_probability(res, dark.P_dc),
    }
    if np.all(run.causes >= 0) and len(run):
        out["true_afterpulse_fraction"] = run.afterpulse_fraction
    return out


def _a1(det: GatedSpadConfig, seed: int) -> dict:
    run = simulate_gated(det, CHARACTERIZATION_TRAIN, A1_GATES, seed)
    return characterize_run(run, CHARACTERIZATION_TRAIN.mean_photons)


def _a2(det: GatedSpadConfig, seed: int) -> str:
    analytic = count_rate_vs_mu(det, CHARACTERIZATION_TRAIN, MU_GRID)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu", "analytic_rate_hz", "simulated_rate_hz", "simulated_sigma_hz"])
    for i, (mu, rate) in enumerate(analytic):
        train = replace(CHARACTERIZATION_TRAIN, mean_photons=mu)
        sim, sig = simulated_count_rate(det, train, 1e7, seed + i)
        w.writerow([f"{mu:.10g}", f"{rate:.9e}", f"{sim:.9e}", f"{sig:.9e}"])
    return buf.getvalue()


def _a3(det: GatedSpadConfig, seed: int) -> tuple[float, float]:
    run = simulate_gated(det, CHARACTERIZATION_TRAIN, 1_000_000_000, seed)
    p = run.afterpulse_fraction
    return p, math.sqrt(p * (1 - p) / max(len(run), 1))


def _a4(det: GatedSpadConfig, seed: int):
    train = PulseTrainConfig(laser_frequency=0.5, mean_photons=A4_MU)
    run = simulate_gated(det, train, A4_GATES, seed)
    hist = afterpulse_histogram(run)
    return hist, fit_histogram(hist, 2)


_STAGES = {"a1": _a1, "a2": _a2, "a3": _a3, "a4": _a4}


def _stage(arg):
    name, seed, trap = arg
    return _STAGES[name](replace(CHARACTERIZATION_DETECTOR, trap_model=trap), seed)


def random_trap_config(rng: np.random.Generator) -> tuple[FreeRunningSpadConfig, float]:
    """A free-running detector with a random 1-3 component trap model.

    Drawn in the isolated-click regime the closed form describes: 1-10 %
    afterpulse probability past the deadtime and a deadtime at most a fifth
    of the shortest lifetime, so that deadtime blocking by afterpulses
    (see :func:`blocking_loss`) stays a small correction.
    """
    n = int(rng.integers(1, 4))
    tau = np.sort(rng.uniform(np.log(20.0), np.log(3000.0), n))
    tau = np.exp(tau)
    while np.any(np.diff(tau) <= 0):
        tau = np.sort(tau * rng.uniform(0.9, 1.1, n))
    share = rng.dirichlet(np.ones(n))
    total = rng.uniform(0.01, 0.1)
    deadtime = float(rng.uniform(2.0, max(2.0, 0.2 * tau[0])))
    amps = share * total / (tau * np.exp(-deadtime / tau))
    trap = TrapModel(tuple(amps), tuple(tau))
    return FreeRunningSpadConfig(efficiency=0.1, dark_rate=1e-5, deadtime=deadtime, trap_model=trap), deadtime


def blocking_loss(trap: TrapModel, tau_d: float) -> float:
    """Second-order afterpulse probability lost because an afterpulse's own
    deadtime hides the rest of its seed's trap emission:
    ``int_{tau_d}^inf f(t) int_t^{t+tau_d} f(s) ds dt``."""
    total = 0.0
    for ai, ti in trap.components:
        for aj, tj in trap.components:
            k = 1.0 / ti + 1.0 / tj
            total += ai * aj * tj * -math.expm1(-tau_d / tj) * math.exp(-tau_d * k) / k
    return total


def _a5_one(args) -> dict:
    k, seed = args
    rng = np.random.default_rng(seed)
    det, tau_d = random_trap_config(rng)
    duration = A5_CLICKS / det.dark_rate
    run = simulate_free_running(det, PulseTrainConfig(laser_frequency=1.0, mean_photons=0.0), duration, seed)
    n = len(run)
    dt_bar = duration / n
    predicted = afterpulse_prob_between(det.trap_model, tau_d, max(dt_bar, tau_d))
    p = run.afterpulse_fraction
    # afterpulses cascade, so clicks are clustered; inflate the binomial variance
    # by the mean cluster size 1/(1-p)
    sigma = math.sqrt(p * (1 - p) / n / (1 - p))
    return {
        "config": k,
        "n_components": det.trap_model.n_components,
        "amplitudes_per_ns": " ".join(f"{a:.6e}" for a in det.trap_model.amplitudes),
        "lifetimes_ns": " ".join(f"{t:.6f}" for t in det.trap_model.lifetimes),
        "deadtime_ns": tau_d,
        "n_clicks": n,
        "mean_interval_ns": dt_bar,
        "predicted": predicted,
        "blocking_loss": blocking_loss(det.trap_model, tau_d),
        "simulated": p,
        "sigma": sigma,
        "z": (p - predicted) / sigma if sigma > 0 else 0.0,
    }


def eq3_check(root_seed: int, n_configs: int = A5_CONFIGS) -> list[dict]:
    seeds = [cfgmod.stage_seed(root_seed, f"eq3.{k}") for k in range(n_configs)]
    return pmap(_a5_one, list(enumerate(seeds)))


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.9e}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def reproduce_paper(out_dir, config_dir="configs", seed: int = 1, distance_grid=None) -> dict:
    """Write all reference datasets to ``out_dir``; returns ``{file: sha256}``."""
    out_dir = Path(out_dir)
    refs = load_reference(config_dir)
    trap = refs["rapid-50ns"].detector.trap_model
    link = refs["rapid-50ns"].link
    if distance_grid is None:
        sc = refs["rapid-50ns"].section("scan")
        distance_grid = np.arange(sc["distance_start_km"], sc["distance_stop_km"] + 1e-9, sc["distance_step_km"])
    stages = tuple(_STAGES)
    seeds = {s: cfgmod.stage_seed(seed, s) for s in stages}
    results = dict(zip(stages, pmap(_stage, [(s, seeds[s], trap) for s in stages])))
    files: dict[str, str] = {}

    def emit(name: str, text: str) -> None:
        atomic_write_text(out_dir / name, text)
        files[name] = sha256_text(text)

    def emit_json(name: str, obj) -> None:
        import json

        emit(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    a1 = results["a1"]
    a1.update({"true_efficiency": CHARACTERIZATION_DETECTOR.efficiency, "true_dark_prob": CHARACTERIZATION_DETECTOR.dark_prob})
    emit_json("characterization.json", a1)
    emit("count_rate_vs_mu.csv", results["a2"])

    hist, fit = results["a4"]
    emit("afterpulse_histogram.csv", hist.to_csv())
    report = fit.to_dict()
    report["reference_model"] = trap.to_dict()
    emit_json("trap_fit.json", report)

    det = CHARACTERIZATION_DETECTOR
    frac_mc, frac_sigma = results["a3"]
    j900 = int(round(INTENSITY_BIN[0] / hist.window_width))
    emit_json("calibration.json", {
        "trap_model": trap.to_dict(),
        "target_afterpulse_fraction": AFTERPULSE_FRACTION,
        "model_afterpulse_fraction": gated_afterpulse_sum(trap, replace(det, trap_model=trap), det.deadtime, math.inf),
        "simulated_afterpulse_fraction": frac_mc,
        "simulated_afterpulse_fraction_sigma": frac_sigma,
        "target_intensity_900ns": INTENSITY_AT_BIN,
        "model_intensity_900ns": float(model_values(trap, [INTENSITY_BIN[0]], INTENSITY_BIN[1] - INTENSITY_BIN[0])[0]),
        "histogram_intensity_900ns": float(hist.corrected_intensity[j900]),
        "histogram_intensity_900ns_sigma": float(hist.sigma[j900]),
    })

    emit("eq3_check.csv", _rows_to_csv(eq3_check(cfgmod.stage_seed(seed, "eq3"))))

    dets = [(k, refs[k].detector) for k in REFERENCE_IDS]
    scans = scan_distance(dets, link, [float(d) for d in distance_grid])
    emit("keyrate_curves.csv", scan_to_csv(scans))
    emit_json("max_distances.json", {s.detector_id: s.max_distance for s in scans})
    return files
