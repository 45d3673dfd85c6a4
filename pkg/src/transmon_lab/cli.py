"""Command-line entry point: ``transmon-lab <subcommand> --config file.json``.

Each subcommand runs one experiment from a JSON configuration and writes CSV
files plus a ``manifest.json`` into the output directory.  Exit codes:

* 0 — success;
* 2 — invalid configuration or unusable inputs (a one-line JSON object
  ``{"error": ..., "message": ...}`` goes to stderr);
* 3 — a convergence or numerical-accuracy check failed (same JSON shape on
  stderr; the manifest, if written, carries the failing entries);
* 1 — unexpected internal failure (traceback).

Worker threads: ``--threads N`` (0 = all CPUs), else the
``TRANSMON_LAB_THREADS`` environment variable, else 1.  Emitted bytes do not
depend on the thread count.

BLAS pools are pinned to one thread per process (before the first numpy
import) so that linear-algebra reductions are deterministic; worker threads
parallelize at the experiment level instead.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

for _var in (
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

from . import __version__
from .errors import (
    AccuracyError,
    ConvergenceError,
    EmptyLayerError,
    InsufficientDataError,
    InvalidParameterError,
    RangeError,
    SchemaError,
    UnitarityError,
)
from .experiments import CSV_SCHEMAS, EXPERIMENTS, ExperimentConfig, run

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CONVERGENCE = 3

_CONFIG_ERRORS = (
    InvalidParameterError,
    RangeError,
    SchemaError,
    InsufficientDataError,
    EmptyLayerError,
)
_ACCURACY_ERRORS = (ConvergenceError, AccuracyError, UnitarityError)

_DESCRIPTIONS = {
    "poincare": "Stroboscopic phase-space sections of the classical pendulum.",
    "pdist": "Late-time momentum distributions, classical and quantum.",
    "sigma-p": "Asymptotic ensemble momentum spread vs drive strength.",
    "crossings": "A fine-grained trajectory and its resonance-line crossings.",
    "relax": "TLS relaxation traces from the three models side by side.",
    "rates": "Measured TLS decay rates vs the golden-rule prediction.",
    "plateau": "Long-time relaxation plateau estimates vs coupling.",
    "dephase": "TLS dephasing traces and envelopes from the three models.",
    "chaotic-layer": "Analytic chaotic-layer bounds and resonance curves.",
    "rmatrix": "Weighted matrix elements of the driven transmon.",
    "rbm-psd": "Spectral density of the reflected-diffusion surrogate.",
    "rbm-path": "One sampled reflected-diffusion momentum path.",
    "floquet-spectrum": "Folded one-period spectra vs offset charge.",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transmon-lab",
        description=(
            "Numerical laboratory for a strongly driven transmon: classical,"
            " quantum, and stochastic-surrogate experiments from JSON"
            " configurations."
        ),
        epilog=(
            "Exit codes: 0 success, 2 invalid configuration (JSON error on"
            " stderr), 3 failed convergence check, 1 unexpected failure."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="experiment", required=True,
                                metavar="<subcommand>")
    for name in EXPERIMENTS:
        p = sub.add_parser(
            name,
            help=_DESCRIPTIONS[name],
            description=f"{_DESCRIPTIONS[name]}\n\nOutput — {CSV_SCHEMAS[name]}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument(
            "--config", required=True, metavar="FILE.json",
            help="experiment configuration (JSON object)",
        )
        p.add_argument(
            "--threads", type=int, default=None, metavar="N",
            help="worker threads; 0 = all CPUs (default: the"
                 " TRANSMON_LAB_THREADS environment variable, else 1)",
        )
        p.add_argument(
            "--out", default=None, metavar="DIR",
            help="output directory (overrides output_dir in the config)",
        )
    return parser


def _emit_error(exc: BaseException) -> None:
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
    )


def _resolve_thread_arg(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("TRANSMON_LAB_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError as exc:
        raise InvalidParameterError(
            f"TRANSMON_LAB_THREADS must be an integer, got {env!r}"
        ) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        _emit_error(exc)
        return EXIT_INVALID
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        _emit_error(exc)
        return EXIT_INVALID
    try:
        if not isinstance(data, dict):
            raise InvalidParameterError(
                f"configuration must be a JSON object, got {type(data).__name__}"
            )
        if args.out is not None:
            data["output_dir"] = args.out
        threads = _resolve_thread_arg(args.threads)
        config = ExperimentConfig.from_dict(data, experiment=args.experiment)
        manifest = run(config, threads=threads)
    except _ACCURACY_ERRORS as exc:
        _emit_error(exc)
        return EXIT_CONVERGENCE
    except _CONFIG_ERRORS as exc:
        _emit_error(exc)
        return EXIT_INVALID
    print(f"wrote {Path(manifest.directory) / 'manifest.json'}")
    for name in manifest.files:
        print(f"  {name}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
