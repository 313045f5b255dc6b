"""File helpers: atomic writes, event CSV ingest, hashing."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def read_text_or_path(path_or_text) -> str:
    """File contents for a path, or the argument itself when it is CSV text
    (anything containing a newline)."""
    if isinstance(path_or_text, Path) or "\n" not in str(path_or_text):
        return Path(path_or_text).read_text()
    return str(path_or_text)


def read_events_csv(path_or_text, *, config=None, pulse_train=None, duration=None):
    """Load a ``time_ns,cause,gate_index`` CSV into a :class:`SimRun`.

    ``cause`` and ``gate_index`` may be missing or empty (hardware data).
    ``duration`` defaults to the last event time.
    """
    from .montecarlo import Cause, SimRun

    text = read_text_or_path(path_or_text)
    rows = list(csv.DictReader(text.splitlines()))
    if rows and "time_ns" not in rows[0]:
        raise ValueError("event CSV needs a time_ns column")
    times = np.array([float(r["time_ns"]) for r in rows], dtype=float)
    causes = np.array(
        [int(Cause.from_label(r["cause"])) if r.get("cause") else -1 for r in rows],
        dtype=np.int8,
    )
    gates = np.array(
        [int(r["gate_index"]) if r.get("gate_index") else -1 for r in rows],
        dtype=np.int64,
    )
    if duration is None:
        duration = float(times[-1]) if times.size else 0.0
    n_gates = None
    if config is not None and hasattr(config, "gate_frequency"):
        n_gates = int(round(duration * config.gate_frequency))
    return SimRun(
        config=config,
        pulse_train=pulse_train,
        duration=duration,
        seed=None,
        times=times,
        causes=causes,
        gate_index=gates,
        n_gates=n_gates,
        metadata={"source": "csv"},
    )
