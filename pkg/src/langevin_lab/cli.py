"""Command line entry point: ``langevin-lab <subcommand> <config>``.

Exit status is 0 when every audit passes, 1 when an audit or a numerical
check fails (the failing names are printed) and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import __version__
from .config import SUBCOMMANDS, ExperimentConfig, load_config, thread_limit
from .errors import ConfigError, LabError
from .experiments import PIPELINES, Outcome, model_from_config
from .export import RunManifest, write_csv, write_json
from .grid import dump_field

log = logging.getLogger("langevin_lab")

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG = 0, 1, 2

_HELP = {
    "equilibrium-check": "partition function, stationarity of f* and Laplace asymptotics",
    "evolve-fpke": "evolve the density equation and record mass/positivity diagnostics",
    "simulate-sde": "Euler-Maruyama particle ensemble with moment and energy audits",
    "entropy-trace": "relative entropies F, G, H along a density-equation run",
    "break-analysis": "short-time derivatives of F, G, H from a break state",
    "spectrum": "spectra of the linearised log-ratio flow and of the density operator",
    "cross-validate": "density equation against particle histogram and moments",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langevin-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("config", type=Path, help="YAML or JSON experiment configuration")
    return parser


def _thread_context(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl not installed; thread limit %d ignored", n)
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def write_outcome(outcome: Outcome, cfg: ExperimentConfig, out: Path, manifest: RunManifest) -> None:
    formats = set(cfg.output["formats"])
    stem = cfg.subcommand.replace("-", "_")
    if "json" in formats:
        manifest.add_artifact(write_json(out / f"{stem}.json", outcome.report))
    if "csv" in formats:
        for name, (header, rows) in outcome.tables.items():
            manifest.add_artifact(write_csv(out / f"{name}.csv", header, rows))
    if "binary" in formats:
        for name, (values, grid, t) in outcome.fields.items():
            path = dump_field(out / f"{name}.bin", values, grid, name, t)
            manifest.add_artifact(path)
            manifest.add_artifact(path.with_suffix(".bin.json"))


def execute(cfg: ExperimentConfig) -> tuple[int, RunManifest]:
    """Run one configured experiment and write its directory."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.subcommand, cfg.digest())
    manifest.add_artifact(write_json(out / "resolved_config.json", cfg.resolved()))
    code = EXIT_OK
    try:
        with _thread_context(thread_limit()):
            model = model_from_config(cfg.model)
            outcome = PIPELINES[cfg.subcommand](model, cfg)
        for name, ok in outcome.audits.items():
            manifest.record(name, ok)
        write_outcome(outcome, cfg, out, manifest)
        manifest.finish()
        if not manifest.passed:
            code = EXIT_AUDIT
    except ConfigError as exc:
        manifest.finish("config_error", str(exc))
        code = EXIT_CONFIG
    except LabError as exc:
        manifest.record(type(exc).__name__, False)
        manifest.finish("failed", str(exc))
        code = EXIT_AUDIT
    finally:
        manifest.add_artifact(out / "manifest.json")
        manifest.write(out)
    return code, manifest


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.subcommand)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, manifest = execute(cfg)
    if code == EXIT_CONFIG:
        print(f"configuration error: {manifest.error}", file=sys.stderr)
    elif code == EXIT_AUDIT:
        detail = f" ({manifest.error})" if manifest.error else ""
        print(f"FAILED: {', '.join(manifest.failed_audits())}{detail}", file=sys.stderr)
    else:
        print(f"passed: {len(manifest.audits)} audits; output in {cfg.out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
