"""
Command-line interface: configuration parsing, experiment orchestration and
result files.

    python -m src.cli_runner solve --config config/n7_alpha1e-1.yaml [--N 7 --alpha 0.1 --out dir]
    python -m src.cli_runner sweep --config config/n7_alpha_sweep.yaml --param alpha --values 1e-1,1e-2

Exit codes: 0 success, 1 configuration error, 2 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import ValidationError
from pythonjsonlogger import jsonlogger

from .config import settings
from .exporters import (
    sweep_row,
    write_controls_csv,
    write_controls_svg,
    write_summary,
    write_sweep_table,
)
from .heat_fem import (
    FactorizationError,
    MeshError,
    SwitchingProblem,
    build_problem,
    evaluate_objective,
)
from .homotopy import FirstStageFailed, SolveReport, run_homotopy, stage_record
from .models import RunConfig, RunSummary
from .optimality import SolverError, solve_fixed_gamma, switching_diagnostics

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2

LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}

# flag name -> (section, field) for overrides of nested settings
SECTION_FIELDS = {
    "gamma_start": ("homotopy", "gamma_start"),
    "reduction_factor": ("homotopy", "reduction_factor"),
    "gamma_min": ("homotopy", "gamma_min"),
    "newton_tol_rel": ("solver", "newton_tol_rel"),
    "newton_max_iter": ("solver", "newton_max_iter"),
    "cg_tol_rel": ("solver", "cg_tol_rel"),
    "cg_max_iter": ("solver", "cg_max_iter"),
    "linesearch_factor": ("solver", "linesearch_factor"),
    "linesearch_max": ("solver", "linesearch_max"),
}


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""
    pass


def setup_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Configure the root logger once: JSON lines by default, plain text on request."""
    handler = logging.StreamHandler()
    if (fmt or settings.log_format) == "text":
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    else:
        handler.setFormatter(jsonlogger.JsonFormatter(
            "%(asctime)s %(levelname)s %(name)s %(message)s",
            rename_fields={"asctime": "timestamp", "levelname": "level"},
        ))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level or settings.log_level)


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Invalid YAML in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping, got {type(data).__name__}")
    return data


def parse_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Merge the YAML file with flag overrides (flags win) and validate.

    Unknown keys, missing N/alpha and non-positive values raise ConfigError.
    """
    data = load_config_file(path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in SECTION_FIELDS:
            section, name = SECTION_FIELDS[key]
            current = data.get(section) or {}
            if not isinstance(current, dict):
                raise ConfigError(f"Section '{section}' must be a mapping")
            data[section] = {**current, name: value}
        else:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"Invalid configuration: {problems}") from exc


def problem_from_config(config: RunConfig) -> SwitchingProblem:
    gamma = config.fixed_gamma if config.fixed_gamma is not None else config.homotopy.gamma_start
    return build_problem(
        config.N, config.alpha, gamma=gamma, T=config.T, time_intervals=config.time_intervals,
        mesh_edge=config.mesh_edge, control_radius=config.control_radius, obs_radius=config.obs_radius,
    )


def solve(config: RunConfig, problem: Optional[SwitchingProblem] = None) -> Tuple[SwitchingProblem, SolveReport]:
    """Homotopy run, or a single Newton solve from p = 0 when fixed_gamma is set."""
    problem = problem or problem_from_config(config)
    if config.fixed_gamma is None:
        report, _ = run_homotopy(problem, config.homotopy, config.solver)
        return problem, report

    staged = problem.with_gamma(config.fixed_gamma)
    state, u = solve_fixed_gamma(np.zeros(problem.shape), staged, config.solver)
    report = SolveReport(stages=[stage_record(staged, state, u)], p=state.p, u=u,
                         last_gamma=config.fixed_gamma)
    return problem, report


def build_summary(config: RunConfig, problem: SwitchingProblem, report: SolveReport) -> RunSummary:
    final = problem.with_gamma(report.last_gamma)
    diagnostics = switching_diagnostics(report.u, report.p, final.penalty)
    return RunSummary(
        N=config.N,
        alpha=config.alpha,
        last_gamma=report.last_gamma,
        tau=diagnostics.tau,
        switch_points=diagnostics.switch_points,
        never_active=diagnostics.never_active,
        objective=evaluate_objective(final, report.u),
        stages=report.stages,
    )


def run_experiment(config: RunConfig, problem: Optional[SwitchingProblem] = None) -> Tuple[SolveReport, RunSummary]:
    """Solve and write controls.csv, summary.json and (optionally) controls.svg to output_dir."""
    problem, report = solve(config, problem)
    summary = build_summary(config, problem, report)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = problem.solver.grid
    write_controls_csv(out / "controls.csv", grid.midpoints, report.u)
    write_summary(out / "summary.json", summary)
    if config.emit_svg:
        final = problem.with_gamma(report.last_gamma)
        d = switching_diagnostics(report.u, report.p, final.penalty).d
        write_controls_svg(out / "controls.svg", grid.midpoints, report.u, d)

    logger.info(
        "Experiment finished",
        extra={"N": config.N, "alpha": config.alpha, "last_gamma": report.last_gamma,
               "tau": summary.tau, "switch_points": summary.switch_points, "output_dir": str(out)},
    )
    return report, summary


def entry_dirname(index: int, alpha: float) -> str:
    """Per-entry output directory; the index keeps repeated values apart."""
    return f"{index:03d}_alpha_{float(alpha)!r}"


def _alpha_entry(base: RunConfig, index: int, alpha: float) -> Dict[str, Any]:
    out = Path(base.output_dir) / entry_dirname(index, alpha)
    entry = base.model_copy(update={"alpha": alpha, "output_dir": str(out)})
    report, summary = run_experiment(entry)
    last = report.last_stage
    return sweep_row("alpha", alpha, summary.tau, {
        "gamma_bar": report.last_gamma,
        "ssn": last.newton_iterations if last else None,
        "cg": last.last_cg_iterations if last else None,
    })


def run_table_sweep(base: RunConfig, param: str, values: Sequence[float]) -> Path:
    """Write sweep_<param>.csv with one row per value.

    An alpha sweep runs one experiment per value (in a thread pool). A gamma
    sweep runs a single homotopy down to min(values) and reports the stages
    whose gamma matches a requested value.
    """
    if param not in {"alpha", "gamma"}:
        raise ConfigError(f"Unsupported sweep parameter '{param}' (use alpha or gamma)")
    out = Path(base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"sweep_{param}.csv"
    values = list(values)
    rows: List[Dict[str, Any]] = []

    if param == "alpha" and values:
        workers = max(1, min(settings.sweep_workers, len(values)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda a: _alpha_entry(base, *a), enumerate(values)))
    elif param == "gamma" and values:
        schedule = base.homotopy.model_copy(update={"gamma_min": min(values)})
        config = base.model_copy(update={"homotopy": schedule, "fixed_gamma": None})
        problem = problem_from_config(config)
        report, _ = run_homotopy(problem, config.homotopy, config.solver)
        for value in values:
            stage = next((s for s in report.stages if np.isclose(s.gamma, value, rtol=1e-9)), None)
            if stage is None:
                rows.append(sweep_row("gamma", value, {}, {"converged": False, "ssn": None, "cg": None}))
                continue
            rows.append(sweep_row("gamma", value, stage.tau, {
                "converged": stage.converged, "ssn": stage.newton_iterations, "cg": stage.last_cg_iterations,
            }))

    write_sweep_table(table, rows, param)
    logger.info("Sweep finished", extra={"param": param, "rows": len(rows), "table": str(table)})
    return table


def _parse_values(raw: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"Invalid --values list '{raw}': {exc}") from exc


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that reports usage errors as ConfigError instead of exiting with 2."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(description="Switching controls for the 2D heat equation")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--N", type=int, help="Number of control components")
    common.add_argument("--alpha", type=float, help="Switching penalty weight")
    common.add_argument("--T", type=float, help="Time horizon")
    common.add_argument("--time-intervals", type=int, dest="time_intervals", help="Number of time intervals")
    common.add_argument("--mesh-edge", type=float, dest="mesh_edge", help="Mesh edge length")
    common.add_argument("--gamma-start", type=float, dest="gamma_start", help="First homotopy gamma")
    common.add_argument("--gamma-min", type=float, dest="gamma_min", help="Smallest homotopy gamma")
    common.add_argument("--fixed-gamma", type=float, dest="fixed_gamma", help="Single solve at this gamma")
    common.add_argument("--out", dest="output_dir", help="Output directory")
    common.add_argument("--svg", dest="emit_svg", action="store_const", const=True, help="Write controls.svg")
    common.add_argument("--log-level", dest="log_level", help="Override SWITCHING_LOG_LEVEL")

    sub.add_parser("solve", parents=[common], help="Run one experiment")
    sweep = sub.add_parser("sweep", parents=[common], help="Run a parameter sweep")
    sweep.add_argument("--param", required=True, choices=["alpha", "gamma"], help="Swept parameter")
    sweep.add_argument("--values", required=True, help="Comma-separated values, e.g. 1e-1,1e-2")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        setup_logging(settings.log_level if settings.log_level in LOG_LEVELS else "INFO")
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG

    level = (args.log_level or settings.log_level).upper()
    if level not in LOG_LEVELS:
        level = "INFO"
    setup_logging(level)

    overrides = {k: v for k, v in vars(args).items()
                 if k not in {"command", "config", "param", "values", "log_level"}}
    try:
        settings.assert_valid()
        if args.command == "sweep" and args.param == "alpha" and overrides.get("alpha") is None:
            # each row supplies its own alpha; the first one satisfies validation
            overrides["alpha"] = next(iter(_parse_values(args.values)), None)
        config = parse_config(args.config, overrides)
        if args.command == "solve":
            run_experiment(config)
        else:
            run_table_sweep(config, args.param, _parse_values(args.values))
    except (ConfigError, MeshError, FactorizationError, RuntimeError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except (FirstStageFailed, SolverError) as exc:
        logger.error("Solver failure: %s", exc)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
