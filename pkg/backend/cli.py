"""
Command-line front end.

    python -m backend decompose --input data.csv --effects random --output report.json
    python -m backend simulate --n 5000 --m 10 --replications 200 --csv-output study.csv
    python -m backend oracle --n 5000 --m 10 --outcome-kind binary
    python -m backend meta --input data.csv --csv-output qis.csv

Precedence: built-in defaults < ``--config FILE.json`` < flags given on
the command line. Errors are reported as one JSON object on stderr and
mapped to exit codes 2 (configuration), 3 (data) and 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from backend.config import LOG_DATE_FORMAT, LOG_FORMAT
from backend.models.errors import ConfigError, NumericalError, OutputError, VarianceLabError
from backend.models.schemas import (
    EffectMode,
    Estimator,
    LinkFunction,
    OutcomeKind,
    ResidualMode,
    RunConfig,
    Subcommand,
)
from backend.services.pipeline import run_decompose, run_meta, run_oracle, run_simulate

logger = logging.getLogger(__name__)

SIMULATION_FLAGS = ("n", "m", "outcome_kind", "zero_hospital_effect", "randomized_assignment", "no_casemix_effect")
NON_CONFIG_FLAGS = ("config", "log_level")

RUNNERS: dict[Subcommand, Callable[[RunConfig], BaseModel]] = {
    Subcommand.DECOMPOSE: run_decompose,
    Subcommand.SIMULATE: run_simulate,
    Subcommand.ORACLE: run_oracle,
    Subcommand.META: run_meta,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _choices(enum: type) -> list[str]:
    return [member.value for member in enum]


def build_parser() -> argparse.ArgumentParser:
    """Parser whose namespaces hold only the flags actually given."""
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores); never changes results")
    common.add_argument("--output", type=Path, help="JSON report path (default: stdout)")
    common.add_argument("--csv-output", dest="csv_output", type=Path, help="tabular CSV output path")
    common.add_argument(
        "--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity on stderr (default WARNING)",
    )

    data = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    data.add_argument("--input", type=Path, help="patient-level CSV with a header row")
    data.add_argument("--outcome-col", dest="outcome_col", help="outcome column (default 'outcome')")
    data.add_argument("--hospital-col", dest="hospital_col", help="hospital label column (default 'hospital')")
    data.add_argument(
        "--covariates", dest="covariate_cols", nargs="+",
        help="case-mix columns (default: every other column)",
    )
    data.add_argument("--outcome-kind", dest="outcome_kind", choices=_choices(OutcomeKind), help="inferred when omitted")

    study = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    study.add_argument("--n", type=int, help="patients per replicate")
    study.add_argument("--m", type=int, help="hospitals")
    study.add_argument("--outcome-kind", dest="outcome_kind", choices=_choices(OutcomeKind), help="default continuous")
    study.add_argument("--zero-hospital-effect", dest="zero_hospital_effect", action="store_true")
    study.add_argument("--randomized-assignment", dest="randomized_assignment", action="store_true")
    study.add_argument("--no-casemix-effect", dest="no_casemix_effect", action="store_true")
    study.add_argument("--oracle-draws", dest="oracle_draws", type=int, help="Monte Carlo draws for the truth")

    parser = argparse.ArgumentParser(
        prog="variance-lab",
        description="Causal variance decomposition of hospital quality indicators.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    dec = subparsers.add_parser(
        Subcommand.DECOMPOSE.value, parents=[common, data], argument_default=argparse.SUPPRESS,
        help="decompose an observed outcome variance",
    )
    dec.add_argument("--link", choices=_choices(LinkFunction), help="default: logit for binary, identity otherwise")
    dec.add_argument("--effects", choices=_choices(EffectMode), help="hospital effects (default fixed)")
    dec.add_argument("--residual-mode", dest="residual_mode", choices=_choices(ResidualMode))
    dec.add_argument("--volume-threshold", dest="volume_threshold", type=int,
                     help="hospitals below this volume get intercept-only assignment terms (default 35)")
    dec.add_argument("--draws", type=int, help="posterior draws for intervals (default 1000)")
    dec.add_argument("--level", type=float, help="credible level (default 0.95)")
    dec.add_argument("--no-intervals", dest="intervals", action="store_false", help="point estimates only")
    dec.add_argument("--draws-output", dest="draws_output", type=Path, help="CSV dump of component draws")

    sim = subparsers.add_parser(
        Subcommand.SIMULATE.value, parents=[common, study], argument_default=argparse.SUPPRESS,
        help="replication study against the Monte Carlo truth",
    )
    sim.add_argument("--replications", type=int, help="replicates (default 200)")
    sim.add_argument("--estimators", nargs="+", choices=_choices(Estimator), help="default FE RE")
    sim.add_argument("--replicates-output", dest="replicates_output", type=Path, help="per-replicate CSV dump")

    subparsers.add_parser(
        Subcommand.ORACLE.value, parents=[common, study], argument_default=argparse.SUPPRESS,
        help="true decomposition of a generating mechanism",
    )
    subparsers.add_parser(
        Subcommand.META.value, parents=[common, data], argument_default=argparse.SUPPRESS,
        help="indirect standardization and DerSimonian-Laird baseline",
    )
    return parser


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _read_config_file(path: Path) -> dict[str, Any]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path.name} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the optional config file and the explicit flags.

    Raises:
        ConfigError: unreadable config file or invalid merged values.
    """
    flags = {k: v for k, v in vars(args).items() if k not in NON_CONFIG_FLAGS}
    merged = _read_config_file(Path(args.config)) if "config" in args else {}
    subcommand = Subcommand(flags.pop("subcommand"))
    merged["subcommand"] = subcommand.value

    if subcommand in (Subcommand.SIMULATE, Subcommand.ORACLE):
        simulation = dict(merged.get("simulation") or {})
        simulation.update({k: flags.pop(k) for k in SIMULATION_FLAGS if k in flags})
        if "seed" in flags:
            simulation["seed"] = flags["seed"]
        elif "seed" in merged:
            simulation.setdefault("seed", merged["seed"])
        if simulation:
            merged["simulation"] = simulation

    merged.update(flags)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _emit_error(exc: Exception, exit_code: int) -> int:
    payload = {"error": type(exc).__name__, "detail": str(exc), "exit_code": exit_code}
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(args, "log_level", "WARNING"),
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        stream=sys.stderr,
    )
    try:
        config = resolve_config(args)
        report = RUNNERS[config.subcommand](config)
    except VarianceLabError as exc:
        return _emit_error(exc, exc.exit_code)
    except ValidationError as exc:
        return _emit_error(NumericalError(f"result failed validation: {exc}"), NumericalError.exit_code)
    except np.linalg.LinAlgError as exc:
        return _emit_error(NumericalError(str(exc)), NumericalError.exit_code)
    except OSError as exc:
        return _emit_error(OutputError(str(exc)), OutputError.exit_code)

    if config.output is None:
        print(report.model_dump_json(indent=2))
    return 0
