"""Run configuration: strict sectioned TOML (or JSON) files.

A config file has top-level ``workflow`` and ``seed`` keys and the sections
``detector``, ``pulse_train``, ``link``, ``simulate``, ``characterize``,
``fit``, ``scan`` and ``output``. Every key is optional (defaults below)
but unknown keys are rejected. Physical quantities carry their unit in the
key name; they are converted to the package's internal units (ns, ns^-1)
here and nowhere else.

Randomness: the root ``seed`` is split into one independent stream per
workflow stage with :func:`stage_seed`, so rerunning one stage of a
multi-stage workflow reproduces exactly what the full run produced.
"""
from __future__ import annotations

import copy
import json
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .detector import (
    DomainError,
    FreeRunningSpadConfig,
    GatedSpadConfig,
    PulseTrainConfig,
    SspdConfig,
    TrapModel,
)
from .qkd import LinkConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

WORKFLOWS = ("simulate", "characterize", "fit", "qkd-scan")
DETECTOR_KINDS = ("gated", "free-running", "sspd")
MANIFEST_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_TRAP_KEYS = {"trap_amplitudes_per_ns": [], "trap_lifetimes_ns": []}

DETECTOR_DEFAULTS: dict[str, dict[str, Any]] = {
    "gated": {
        "kind": "gated",
        "efficiency": 0.10,
        "gate_frequency_ghz": 2.23,
        "gate_width_ns": 0.1,
        "dark_prob_per_gate": 4.8e-7,
        "deadtime_ns": 10.0,
        "temperature_c": -40.0,
        "blocked_clicks_fill_traps": False,
        **_TRAP_KEYS,
    },
    "free-running": {
        "kind": "free-running",
        "efficiency": 0.10,
        "dark_rate_hz": 5000.0,
        "deadtime_ns": 30000.0,
        "blocked_clicks_fill_traps": False,
        **_TRAP_KEYS,
    },
    "sspd": {
        "kind": "sspd",
        "efficiency": 0.10,
        "dark_rate_hz": 10.0,
        "recovery_time_ns": 20.0,
    },
}

SECTION_DEFAULTS: dict[str, dict[str, Any]] = {
    "pulse_train": {
        "laser_frequency_mhz": 10.0,
        "mean_photons": 0.1,
        "detection_window_ns": 0.1,
    },
    "link": {
        "fiber_attenuation_db_per_km": 0.2,
        "bob_insertion_loss_db": 3.0,
        "pulse_rate_mhz": 625.0,
        "mean_photons": 0.5,
        "decoy_probability": 0.1,
        "visibility": 0.98,
        "optical_error": 0.01,
        "ec_efficiency": 1.1,
        "sifting_factor": 0.5,
        "detection_window_ns": 0.1,
    },
    "simulate": {
        # gated runs use n_gates when positive, otherwise duration_ns
        "n_gates": 10_000_000,
        "duration_ns": 0.0,
        "max_events": 20_000_000,
    },
    "characterize": {
        "input": "",
        "window_ns": 50.0,
        "range_ns": 1000.0,
        "quiet_time_ns": 10_000.0,
        "coincidence_window_ns": 0.0,
    },
    "fit": {
        "input": "",
        "components": 2,
    },
    "scan": {
        "detector_id": "",
        "distance_start_km": 0.0,
        "distance_stop_km": 400.0,
        "distance_step_km": 5.0,
    },
    "output": {
        "dir": "out",
    },
}

TOP_DEFAULTS = {"workflow": "simulate", "seed": 1}

# internal field name -> config key, for readable validation errors
_FIELD_KEYS = {
    "gate_frequency": "gate_frequency_ghz",
    "gate_width": "gate_width_ns",
    "dark_prob": "dark_prob_per_gate",
    "deadtime": "deadtime_ns",
    "dark_rate": "dark_rate_hz",
    "recovery_time": "recovery_time_ns",
    "laser_frequency": "laser_frequency_mhz",
    "detection_window": "detection_window_ns",
    "fiber_attenuation": "fiber_attenuation_db_per_km",
    "bob_insertion_loss": "bob_insertion_loss_db",
    "pulse_rate": "pulse_rate_mhz",
    "trap amplitudes": "trap_amplitudes_per_ns",
    "trap lifetimes": "trap_lifetimes_ns",
}


def stage_seed(root_seed: int, stage: str) -> int:
    """Independent 64-bit seed for one workflow stage.

    ``SeedSequence(root_seed, spawn_key=(crc32(stage),))`` so each named stage
    gets its own stream regardless of which other stages run.
    """
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1, np.uint64)[0])


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    return True


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{name}: expected a section")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{name}.{key}'")
        if not _type_ok(defaults[key], value):
            raise ConfigError(f"'{name}.{key}' has the wrong type: {value!r}")
        d = defaults[key]
        out[key] = float(value) if isinstance(d, float) else (
            [float(v) for v in value] if isinstance(d, list) else value
        )
    return out


def resolve(raw: dict) -> dict:
    """Fill defaults and reject unknown keys; returns a new nested dict."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table of sections")
    out: dict[str, Any] = dict(TOP_DEFAULTS)
    for key, value in raw.items():
        if key in TOP_DEFAULTS:
            if not _type_ok(TOP_DEFAULTS[key], value):
                raise ConfigError(f"'{key}' has the wrong type: {value!r}")
            out[key] = value
        elif key != "detector" and key not in SECTION_DEFAULTS:
            raise ConfigError(f"unknown key '{key}'")
    if out["workflow"] not in WORKFLOWS:
        raise ConfigError(f"'workflow' must be one of {', '.join(WORKFLOWS)}, got {out['workflow']!r}")
    if out["seed"] < 0:
        raise ConfigError("'seed' must be non-negative")
    det = raw.get("detector", {})
    if not isinstance(det, dict):
        raise ConfigError("detector: expected a section")
    kind = det.get("kind", "gated")
    if kind not in DETECTOR_KINDS:
        raise ConfigError(f"'detector.kind' must be one of {', '.join(DETECTOR_KINDS)}, got {kind!r}")
    out["detector"] = _merge_section("detector", DETECTOR_DEFAULTS[kind], det)
    for name, defaults in SECTION_DEFAULTS.items():
        out[name] = _merge_section(name, defaults, raw.get(name, {}))
    build(out)  # validates physical ranges
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are TOML literals
    (bare words are taken as strings)."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        if len(parts) == 1:
            if key not in TOP_DEFAULTS:
                raise ConfigError(f"unknown key '{key}'")
            raw[key] = _parse_value(text.strip())
            continue
        if len(parts) != 2:
            raise ConfigError(f"unknown key '{key}'")
        section, name = parts
        if section != "detector" and section not in SECTION_DEFAULTS:
            raise ConfigError(f"unknown key '{key}'")
        sec = raw.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{section}: expected a section")
        sec[name] = _parse_value(text.strip())
    return raw


def read_raw(path) -> dict:
    """Parse a TOML or JSON config file. A run manifest is accepted too:
    its embedded ``config`` is returned."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if isinstance(data, dict) and "schema_version" in data and "config" in data:
        data = data["config"]
    return data


def _named(exc: DomainError, section: str) -> ConfigError:
    msg = str(exc)
    for fld, key in _FIELD_KEYS.items():
        if msg.startswith(fld):
            msg = f"'{section}.{key}': {msg}"
            break
    else:
        msg = f"[{section}] {msg}"
    return ConfigError(msg)


def build_detector(det: dict):
    """Detector config object from a resolved ``detector`` section."""
    try:
        kind = det["kind"]
        if kind == "sspd":
            return SspdConfig(
                efficiency=det["efficiency"],
                dark_rate=det["dark_rate_hz"] * 1e-9,
                recovery_time=det["recovery_time_ns"],
            )
        if len(det["trap_amplitudes_per_ns"]) != len(det["trap_lifetimes_ns"]):
            raise ConfigError("'detector.trap_amplitudes_per_ns' and 'detector.trap_lifetimes_ns' differ in length")
        trap = TrapModel(tuple(det["trap_amplitudes_per_ns"]), tuple(det["trap_lifetimes_ns"]))
        if kind == "gated":
            return GatedSpadConfig(
                gate_frequency=det["gate_frequency_ghz"],
                gate_width=det["gate_width_ns"],
                efficiency=det["efficiency"],
                dark_prob=det["dark_prob_per_gate"],
                deadtime=det["deadtime_ns"],
                trap_model=trap,
                temperature_label=det["temperature_c"],
                blocked_clicks_fill_traps=det["blocked_clicks_fill_traps"],
            )
        return FreeRunningSpadConfig(
            efficiency=det["efficiency"],
            dark_rate=det["dark_rate_hz"] * 1e-9,
            deadtime=det["deadtime_ns"],
            trap_model=trap,
            blocked_clicks_fill_traps=det["blocked_clicks_fill_traps"],
        )
    except DomainError as exc:
        raise _named(exc, "detector") from None


def detector_section(detector) -> dict:
    """Inverse of :func:`build_detector`."""
    if isinstance(detector, SspdConfig):
        return {
            "kind": "sspd",
            "efficiency": detector.efficiency,
            "dark_rate_hz": detector.dark_rate * 1e9,
            "recovery_time_ns": detector.recovery_time,
        }
    trap = {
        "trap_amplitudes_per_ns": list(detector.trap_model.amplitudes),
        "trap_lifetimes_ns": list(detector.trap_model.lifetimes),
    }
    if isinstance(detector, GatedSpadConfig):
        return {
            "kind": "gated",
            "efficiency": detector.efficiency,
            "gate_frequency_ghz": detector.gate_frequency,
            "gate_width_ns": detector.gate_width,
            "dark_prob_per_gate": detector.dark_prob,
            "deadtime_ns": detector.deadtime,
            "temperature_c": detector.temperature_label,
            "blocked_clicks_fill_traps": detector.blocked_clicks_fill_traps,
            **trap,
        }
    return {
        "kind": "free-running",
        "efficiency": detector.efficiency,
        "dark_rate_hz": detector.dark_rate * 1e9,
        "deadtime_ns": detector.deadtime,
        "blocked_clicks_fill_traps": detector.blocked_clicks_fill_traps,
        **trap,
    }


def build_link(sec: dict) -> LinkConfig:
    try:
        return LinkConfig(
            fiber_attenuation=sec["fiber_attenuation_db_per_km"],
            bob_insertion_loss=sec["bob_insertion_loss_db"],
            pulse_rate=sec["pulse_rate_mhz"],
            mean_photons=sec["mean_photons"],
            decoy_probability=sec["decoy_probability"],
            visibility=sec["visibility"],
            optical_error=sec["optical_error"],
            ec_efficiency=sec["ec_efficiency"],
            sifting_factor=sec["sifting_factor"],
            detection_window=sec["detection_window_ns"],
        )
    except DomainError as exc:
        raise _named(exc, "link") from None


def link_section(link: LinkConfig) -> dict:
    return {
        "fiber_attenuation_db_per_km": link.fiber_attenuation,
        "bob_insertion_loss_db": link.bob_insertion_loss,
        "pulse_rate_mhz": link.pulse_rate,
        "mean_photons": link.mean_photons,
        "decoy_probability": link.decoy_probability,
        "visibility": link.visibility,
        "optical_error": link.optical_error,
        "ec_efficiency": link.ec_efficiency,
        "sifting_factor": link.sifting_factor,
        "detection_window_ns": link.detection_window,
    }


def build_pulse_train(sec: dict) -> PulseTrainConfig:
    try:
        return PulseTrainConfig(
            laser_frequency=sec["laser_frequency_mhz"],
            mean_photons=sec["mean_photons"],
            detection_window=sec["detection_window_ns"],
        )
    except DomainError as exc:
        raise _named(exc, "pulse_train") from None


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with built model objects.

    ``resolved`` is the full nested dict (defaults filled in) that is hashed
    into the run manifest and can be re-read to reproduce the run.
    """

    resolved: dict = field(repr=False)
    detector: Any
    pulse_train: PulseTrainConfig
    link: LinkConfig

    @property
    def workflow(self) -> str:
        return self.resolved["workflow"]

    @property
    def seed(self) -> int:
        return int(self.resolved["seed"])

    def section(self, name: str) -> dict:
        return self.resolved[name]

    def canonical_json(self) -> str:
        return json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))


def build(resolved: dict) -> RunConfig:
    sim = resolved["simulate"]
    if sim["n_gates"] < 0 or sim["duration_ns"] < 0 or sim["max_events"] <= 0:
        raise ConfigError("'simulate.n_gates', 'simulate.duration_ns' must be >= 0 and 'simulate.max_events' > 0")
    ch = resolved["characterize"]
    for key in ("window_ns", "range_ns", "quiet_time_ns"):
        if not ch[key] > 0:
            raise ConfigError(f"'characterize.{key}' must be positive")
    if not 1 <= resolved["fit"]["components"] <= 4:
        raise ConfigError("'fit.components' must be between 1 and 4")
    sc = resolved["scan"]
    if sc["distance_start_km"] < 0 or not sc["distance_step_km"] > 0 or sc["distance_stop_km"] < sc["distance_start_km"]:
        raise ConfigError("'scan.distance_*' must describe a non-negative ascending grid")
    return RunConfig(
        resolved=resolved,
        detector=build_detector(resolved["detector"]),
        pulse_train=build_pulse_train(resolved["pulse_train"]),
        link=build_link(resolved["link"]),
    )


def load(path=None, overrides=(), **flags) -> RunConfig:
    """Read, override and validate a run config.

    Precedence, lowest to highest: built-in defaults, file values,
    ``--set`` overrides, then explicit keyword ``flags`` given as
    ``section.key`` (or top-level key) names mapped to values.
    """
    raw = read_raw(path) if path is not None else {}
    raw = apply_overrides(raw, overrides)
    for key, value in flags.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            raw.setdefault(section, {})[name] = value
        else:
            raw[key] = value
    return build(resolve(raw))


def dump_toml(resolved: dict) -> str:
    import tomli_w

    return tomli_w.dumps(resolved)
