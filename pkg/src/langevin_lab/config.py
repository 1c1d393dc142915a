"""Experiment configuration: a YAML (or JSON) document validated against a
JSON schema before any computation. Unknown keys are rejected.

Layout::

    model:   {family, beta, params: {...}, bounds: [lo, hi]}
    grid:    {nq, np, p_max}
    run:     subcommand-specific keys (see RUN_SCHEMAS)
    output:  {directory, formats: [csv, json, binary]}

Environment overrides (the only ones honoured): ``LANGEVIN_LAB_OUTPUT_DIR``
replaces ``output.directory`` and ``LANGEVIN_LAB_THREADS`` caps the number of
BLAS threads.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError

ENV_OUTPUT_DIR = "LANGEVIN_LAB_OUTPUT_DIR"
ENV_THREADS = "LANGEVIN_LAB_THREADS"

SUBCOMMANDS = ("equilibrium-check", "evolve-fpke", "simulate-sde", "entropy-trace", "break-analysis",
               "spectrum", "cross-validate")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_auto_or_pos = {"anyOf": [{"const": "auto"}, _pos]}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_matrix2 = {"type": "array", "items": _pair, "minItems": 2, "maxItems": 2}

_g0 = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tilt": _num,
        "mode": {"type": "integer", "minimum": 1},
        "profile": {"enum": ["cos", "sin", "tanh", "shift"]},
        "shift": _num,
    },
}

_initial_fpke = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["equilibrium", "product", "shifted", "gaussian", "mixture"]},
        "g0": _g0,
        "a": _num,
        "weight": {"type": "number", "minimum": 0, "maximum": 1},
        "mean": _pair,
        "cov": _matrix2,
        "tilt": _num,
        "mode": {"type": "integer", "minimum": 1},
        "profile": {"enum": ["cos", "sin", "tanh", "shift"]},
        "shift": _num,
    },
}

_initial_sde = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["equilibrium", "cold", "hot", "gaussian"]},
        "q": _num,
        "scale": _pos,
        "mean": _pair,
        "cov": _matrix2,
    },
}


def _run(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


RUN_SCHEMAS = {
    "equilibrium-check": _run({
        "sizes": {"type": "array", "items": {"type": "array", "items": _posint, "minItems": 2,
                                             "maxItems": 2}, "minItems": 2},
        "order_band": _pair,
        "laplace_betas": {"type": "array", "items": _pos},
        "z_rtol": _pos,
    }),
    "evolve-fpke": _run({
        "dt": _auto_or_pos, "t_end": _pos, "snapshot_every": _posint, "initial_condition": _initial_fpke,
        "dump_snapshots": {"type": "boolean"},
    }, ["t_end"]),
    "entropy-trace": _run({
        "dt": _auto_or_pos, "t_end": _pos, "snapshot_every": _posint, "initial_condition": _initial_fpke,
        "rate_tol": _pos,
    }, ["t_end"]),
    "break-analysis": _run({
        "g0": {"anyOf": [_g0, {"const": "equilibrium"}]},
        "window": _auto_or_pos, "dt": _auto_or_pos, "n_snap": {"type": "integer", "minimum": 5},
    }),
    "simulate-sde": _run({
        "N": _posint, "dt": _pos, "t_end": {"type": "number", "minimum": 0}, "seed": {"type": "integer"},
        "record_every": _posint, "n_batches": {"type": "integer", "minimum": 2},
        "initial": _initial_sde, "histogram": {"type": "boolean"}, "dump_ensemble": {"type": "boolean"},
        "energy_audit": {"type": "boolean"},
    }, ["N", "dt", "t_end"]),
    "spectrum": _run({"n_probes": _posint, "seed": {"type": "integer"}, "pair_tol": _pos}),
    "cross-validate": _run({
        "N": _posint, "dt": _pos, "t_end": _pos, "seed": {"type": "integer"},
        "initial_condition": _initial_fpke, "coarsen": {"type": "array", "items": _posint,
                                                        "minItems": 2, "maxItems": 2},
        "l1_tol": _pos,
    }, ["N", "dt", "t_end"]),
}

BASE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "beta"],
            "properties": {
                "family": {"enum": ["harmonic", "pendulum", "variable_mass_pendulum", "tabulated"]},
                "beta": _pos,
                "params": {"type": "object"},
                "bounds": _pair,
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"nq": {"type": "integer", "minimum": 16},
                           "np": {"type": "integer", "minimum": 16},
                           "p_max": {"anyOf": [{"type": "null"}, _pos]}},
        },
        "run": {"type": "object"},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json", "binary"]},
                            "uniqueItems": True},
            },
        },
    },
}

DEFAULTS = {
    "grid": {"nq": 128, "np": 128, "p_max": None},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

# dense eigendecompositions need a much coarser default grid
SPECTRUM_GRID = {"nq": 32, "np": 32, "p_max": None}


@dataclass
class ExperimentConfig:
    subcommand: str
    model: dict
    grid: dict
    run: dict
    output: dict
    source: str | None = None

    def resolved(self) -> dict:
        return {"subcommand": self.subcommand, "model": self.model, "grid": self.grid, "run": self.run,
                "output": self.output}

    def digest(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def out_dir(self) -> Path:
        return Path(self.output["directory"])


def _line_of(text: str, path: list) -> int | None:
    """1-based line number of a key path in a YAML document, if it can be found."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(key):
                    line, node = k.start_mark.line + 1, v
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _validate(doc, schema, text: str, prefix: list) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            path = prefix + list(err.absolute_path)
            where = ".".join(str(p) for p in path) or "<root>"
            ln = _line_of(text, path)
            lines.append(f"{'line ' + str(ln) + ': ' if ln else ''}{where}: {err.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))


def parse_config(text: str, subcommand: str, source: str | None = None,
                 environ: dict | None = None) -> ExperimentConfig:
    """Parse, validate and resolve defaults and environment overrides."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse configuration: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    _validate(doc, BASE_SCHEMA, text, [])
    run = doc.get("run", {}) or {}
    _validate(run, RUN_SCHEMAS[subcommand], text, ["run"])
    grid_defaults = SPECTRUM_GRID if subcommand == "spectrum" else DEFAULTS["grid"]
    grid = {**grid_defaults, **(doc.get("grid") or {})}
    output = {**copy.deepcopy(DEFAULTS["output"]), **(doc.get("output") or {})}
    environ = os.environ if environ is None else environ
    if environ.get(ENV_OUTPUT_DIR):
        output["directory"] = environ[ENV_OUTPUT_DIR]
    model = {"params": {}, **doc["model"]}
    return ExperimentConfig(subcommand, model, grid, run, output, source)


def load_config(path, subcommand: str, environ: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text, subcommand, str(path), environ)


def thread_limit(environ: dict | None = None) -> int | None:
    environ = os.environ if environ is None else environ
    raw = environ.get(ENV_THREADS)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    return n
