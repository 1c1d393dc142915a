"""Deterministic CSV/JSON writers and the per-run manifest."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


def _plain(obj):
    """Convert numpy scalars/arrays and complex numbers to JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": _plain(obj.real), "im": _plain(obj.imag)}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj))
    return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> Path:
    """CSV with a header row; floats written with round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row of length {len(row)} does not match header of length {len(header)}")
            writer.writerow([_cell(v) for v in row])
    return path


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    audits: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: str = "running"
    error: str | None = None
    version: str = __version__
    wall_time: float = 0.0
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, name: str, passed: bool) -> None:
        self.audits[name] = bool(passed)

    def add_artifact(self, path) -> None:
        self.artifacts.append(Path(path).name)

    @property
    def passed(self) -> bool:
        return all(self.audits.values())

    def failed_audits(self) -> list[str]:
        return [k for k, v in self.audits.items() if not v]

    def finish(self, status: str | None = None, error: str | None = None) -> None:
        self.wall_time = time.perf_counter() - self._start
        self.status = status or ("passed" if self.passed else "failed")
        self.error = error

    def as_dict(self) -> dict:
        return {"artifact_version": self.version, "subcommand": self.subcommand,
                "config_hash": self.config_hash, "wall_time_s": self.wall_time, "status": self.status,
                "error": self.error, "audits": dict(sorted(self.audits.items())),
                "artifacts": sorted(self.artifacts)}

    def write(self, directory) -> Path:
        return write_json(Path(directory) / "manifest.json", self.as_dict())
