"""``spadlab`` command line.

Subcommands ``simulate``, ``characterize``, ``fit``, ``qkd-scan`` and
``reproduce-paper``. Exit status: 0 success, 1 configuration error, 2
numerical non-convergence. Every run writes ``run-manifest.json`` next to
its outputs; the manifest can be passed back as ``--config`` to repeat the
run.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError, RunConfig
from .detector import DomainError, GatedSpadConfig
from .estimators import ConvergenceError as EstimatorConvergenceError
from .estimators import afterpulse_histogram, read_histogram_csv
from .io import atomic_write_json, atomic_write_text, read_events_csv, sha256_text
from .montecarlo import GENERATOR_ID, Cause, ConfigurationError, simulate, simulate_gated
from .qkd import ConvergenceError as QkdConvergenceError
from .qkd import scan_distance, scan_to_csv
from .trapfit import FitError, fit_multi_exponential

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2


class NonConvergence(RuntimeError):
    pass


def manifest(workflow: str, resolved: dict | None, seed: int, stages: dict, outputs: dict, extra=None) -> dict:
    doc = {
        "schema_version": cfgmod.MANIFEST_SCHEMA_VERSION,
        "tool": "spadlab",
        "version": __version__,
        "workflow": workflow,
        "seed": seed,
        "stage_seeds": stages,
        "generator": GENERATOR_ID,
        "numpy_version": np.__version__,
        "outputs": outputs,
    }
    if resolved is not None:
        doc["config"] = resolved
        doc["config_sha256"] = sha256_text(json.dumps(resolved, sort_keys=True, separators=(",", ":")))
    if extra:
        doc.update(extra)
    return doc


class _Outputs:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.hashes: dict[str, str] = {}

    def text(self, name: str, text: str) -> None:
        atomic_write_text(self.dir / name, text)
        self.hashes[name] = sha256_text(text)

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _simulate_run(rc: RunConfig, stage: str):
    sim = rc.section("simulate")
    seed = cfgmod.stage_seed(rc.seed, stage)
    det = rc.detector
    if isinstance(det, GatedSpadConfig) and sim["n_gates"] > 0:
        run = simulate_gated(det, rc.pulse_train, int(sim["n_gates"]), seed, max_events=sim["max_events"])
    else:
        if not sim["duration_ns"] > 0:
            raise ConfigError("'simulate.duration_ns' must be positive (or set 'simulate.n_gates' for a gated detector)")
        run = simulate(det, rc.pulse_train, sim["duration_ns"], seed, max_events=sim["max_events"])
    return run, seed


def cmd_simulate(rc: RunConfig, out: _Outputs) -> dict:
    run, seed = _simulate_run(rc, "simulate")
    out.text("events.csv", run.to_csv())
    out.json("summary.json", {
        "n_clicks": len(run),
        "n_blocked": run.n_blocked,
        "counts": {c.label: run.count(c) for c in Cause},
        "afterpulse_fraction": run.afterpulse_fraction,
        "duration_ns": run.duration,
    })
    return {"simulate": seed}


def cmd_characterize(rc: RunConfig, out: _Outputs) -> dict:
    from .reproduce import characterize_run

    ch = rc.section("characterize")
    stages = {}
    if ch["input"]:
        run = read_events_csv(Path(ch["input"]), config=rc.detector, pulse_train=rc.pulse_train)
    else:
        run, stages["characterize.simulate"] = _simulate_run(rc, "characterize.simulate")
    if not isinstance(rc.detector, GatedSpadConfig):
        raise ConfigError("'detector.kind' must be 'gated' for characterize")
    report = characterize_run(run, rc.pulse_train.mean_photons, ch["quiet_time_ns"])
    out.json("characterization.json", report)
    if rc.pulse_train.period > ch["range_ns"]:
        cw = ch["coincidence_window_ns"] or None
        hist = afterpulse_histogram(run, ch["window_ns"], ch["range_ns"], cw)
        out.text("afterpulse_histogram.csv", hist.to_csv())
    return stages


def cmd_fit(rc: RunConfig, out: _Outputs) -> dict:
    fit = rc.section("fit")
    t, y, sigma, width = read_histogram_csv(Path(fit["input"]))
    result = fit_multi_exponential((t, y, sigma), fit["components"], bin_width=width)
    out.json("fit.json", result.to_dict())
    if not result.converged:
        raise NonConvergence(f"fit did not converge in {result.n_iterations} iterations (report written)")
    return {}


def cmd_qkd_scan(rc: RunConfig, out: _Outputs) -> dict:
    sc = rc.section("scan")
    grid = np.arange(sc["distance_start_km"], sc["distance_stop_km"] + 1e-9, sc["distance_step_km"])
    det_id = sc["detector_id"] or rc.detector.kind
    scans = scan_distance([(det_id, rc.detector)], rc.link, [float(d) for d in grid])
    out.text("keyrate.csv", scan_to_csv(scans))
    out.json("max_distance.json", {s.detector_id: s.max_distance for s in scans})
    return {}


COMMANDS = {
    "simulate": cmd_simulate,
    "characterize": cmd_characterize,
    "fit": cmd_fit,
    "qkd-scan": cmd_qkd_scan,
}


def _check_inputs(rc: RunConfig) -> None:
    """Validate referenced files before any computation."""
    if rc.workflow == "characterize" and rc.section("characterize")["input"]:
        if not Path(rc.section("characterize")["input"]).is_file():
            raise ConfigError(f"'characterize.input' not found: {rc.section('characterize')['input']}")
    if rc.workflow == "fit":
        path = rc.section("fit")["input"]
        if not path:
            raise ConfigError("'fit.input' is required (or pass --input)")
        if not Path(path).is_file():
            raise ConfigError(f"'fit.input' not found: {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spadlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"spadlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "reproduce-paper"):
        sp = sub.add_parser(name)
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="root seed (overrides seed)")
        if name == "reproduce-paper":
            sp.add_argument("--config-dir", default="configs", help="directory with the reference configs")
            continue
        sp.add_argument("--config", help="TOML or JSON config, or a run-manifest.json")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. detector.deadtime_ns=50 (repeatable)")
        if name in ("fit", "characterize"):
            sp.add_argument("--input", help=f"input file (overrides {name}.input)")
        if name == "fit":
            sp.add_argument("--components", type=int, help="number of exponentials (overrides fit.components)")
    return p


def _run(args) -> int:
    if args.command == "reproduce-paper":
        from .reproduce import reproduce_paper

        seed = 1 if args.seed is None else args.seed
        out_dir = Path(args.out or "out/reproduce")
        if not Path(args.config_dir).is_dir():
            raise ConfigError(f"config directory not found: {args.config_dir}")
        files = reproduce_paper(out_dir, args.config_dir, seed)
        refs = {p.name: sha256_text(p.read_text()) for p in sorted(Path(args.config_dir).glob("*.toml"))}
        doc = manifest("reproduce-paper", None, seed, {}, files, {"reference_configs": refs})
        atomic_write_json(out_dir / "run-manifest.json", doc)
        print(f"wrote {len(files)} datasets to {out_dir}")
        return EXIT_OK

    flags = {"workflow": args.command, "seed": args.seed, "output.dir": args.out}
    if getattr(args, "input", None) is not None:
        flags[f"{args.command}.input"] = args.input
    if getattr(args, "components", None) is not None:
        flags["fit.components"] = args.components
    rc = cfgmod.load(args.config, args.overrides, **flags)
    _check_inputs(rc)
    out = _Outputs(Path(rc.section("output")["dir"]))
    stages = COMMANDS[args.command](rc, out)
    atomic_write_json(out.dir / "run-manifest.json", manifest(args.command, rc.resolved, rc.seed, stages, out.hashes))
    print(f"{args.command}: wrote {', '.join(out.hashes)} to {out.dir}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ConfigurationError, DomainError, FileNotFoundError) as exc:
        print(f"spadlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QkdConvergenceError, EstimatorConvergenceError, NonConvergence, FitError, OverflowError) as exc:
        print(f"spadlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    raise SystemExit(main())
