"""
Command-line entry point for the DC microgrid energy-management experiments.

    python app.py simulate --config configs/default_config.json
    python app.py tune --config configs/default_config.json --out results/tune
    python app.py compare --config configs/default_config.json --fis results/tune/tuned_fis.json

Exit codes:
    0  success
    1  unexpected error
    2  configuration error (unreadable or invalid config, bad flags)
    3  numerical divergence (the offending simulated time is logged)
    4  a tuned FIS is required but missing
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv

from controllers import ControllerConfig, ControllerKind
from errors import ConfigError, MicrogridError, MissingFisError, NumericalDivergenceError
from fuzzy_engine import FisDefinition, load_fis, save_fis
from microgrid_plant import PlantParams
from pso_tuner import (
    TuningObjective,
    cost_from_log,
    decode_fis,
    default_bounds,
    encode_fis,
    parameter_labels,
    pso_optimize,
)
from run_config import ENV_LOG_LEVEL, RunConfig, apply_overrides, controller_variant, load_run_config
from scenarios import MetricsReport, Regime, RunLog, ScenarioSpec, compute_metrics, make_scenario, make_transfer_scenario
from simulation import SimSettings, run_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING_FIS = 4

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
REGULATION_TARGET = 0.95
SEPARATION_FACTOR = 0.9
COMPARE_ORDER = (ControllerKind.PI, ControllerKind.FUZZY_INITIAL, ControllerKind.FUZZY_TUNED)


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    logger.info(f" Wrote {path}")
    return path


def _write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f" Wrote {path}")
    return path


def exit_code_for(error: Exception) -> int:
    """Log a failure and map it to its documented exit code."""
    if isinstance(error, ConfigError):
        logger.error(f" Configuration error: {error}")
        return EXIT_CONFIG
    if isinstance(error, NumericalDivergenceError):
        logger.error(f" Numerical divergence at t={error.time:.6f} s: {error}")
        return EXIT_DIVERGENCE
    if isinstance(error, MissingFisError):
        logger.error(f" Missing tuned FIS: {error}")
        return EXIT_MISSING_FIS
    if isinstance(error, MicrogridError):
        logger.error(f" Run failed: {error}")
        return EXIT_UNEXPECTED
    logger.error(f" Unexpected error: {error}", exc_info=error)
    return EXIT_UNEXPECTED


def exit_status(workflow):
    """Run a workflow and turn its failures into the documented exit codes."""

    def guarded(*args, **kwargs) -> int:
        try:
            return workflow(*args, **kwargs)
        except Exception as e:
            return exit_code_for(e)

    guarded.__name__ = workflow.__name__
    guarded.__doc__ = workflow.__doc__
    guarded.__wrapped__ = workflow
    return guarded


# --- simulate --------------------------------------------------------------------------

@exit_status
def run_simulate(config: RunConfig, plot: bool = False) -> int:
    """One closed-loop run: ``run_log.csv`` and ``metrics.json`` in the output directory."""
    out = config.output_dir
    scenario = config.scenario
    log = run_simulation(config.plant, config.controller, scenario, config.sim)
    log.to_csv(out / "run_log.csv")
    logger.info(f" Wrote {out / 'run_log.csv'}")

    metrics = compute_metrics(log, config.plant.v_nominal, config.sim.settle_time)
    _write_json(out / "metrics.json", {
        "controller": config.controller.kind.value,
        "regime": scenario.regime.value,
        "seed": scenario.seed,
        "duration": scenario.duration,
        "dt": config.sim.dt,
        **metrics.to_dict(),
        "regulation_ok": metrics.regulation_ok_fraction >= REGULATION_TARGET,
    })
    logger.info(
        f" Q = {metrics.q_battery:.4g} A s, IAE = {metrics.iae_pct:.4f} %, "
        f"max deviation = {metrics.max_dev_pct:.3f} %, in band = {metrics.regulation_ok_fraction:.3f}"
    )
    if plot:
        from plots import plot_run

        plot_run(log, out / "run.png", config.plant.v_nominal, title=f"{config.controller.kind.value} / {scenario.regime.value}")
    return EXIT_OK


# --- tune ------------------------------------------------------------------------------

def _tune(config: RunConfig, template_controller: ControllerConfig, out: Path, plot: bool = False) -> FisDefinition:
    if not template_controller.kind.is_fuzzy:
        raise ConfigError("tune needs a fuzzy controller as template (controller.kind fuzzy_initial)")
    template = template_controller.fis
    settings = config.tuning_settings()
    objective = TuningObjective(
        template,
        config.plant,
        template_controller,
        config.scenario,
        settings,
        battery_weight=config.tune.battery_weight,
        exponent=config.tune.battery_exponent,
    )
    swarm = config.tune.swarm
    logger.info(
        f" Tuning {len(encode_fis(template))} output MF parameters: population {swarm.population}, "
        f"{swarm.iterations} iterations, seed {swarm.seed}, {config.workers} worker(s)"
    )
    result = pso_optimize(objective, default_bounds(template), swarm, initial=encode_fis(template), workers=config.workers)

    tuned = decode_fis(template, result.best_params)
    fis_path = save_fis(tuned, out / "tuned_fis.json")

    iterations = range(1, len(result.history) + 1)
    _write_frame(out / "convergence.csv", pd.DataFrame({"iteration": iterations, "best_cost": result.history}))
    trajectories = pd.DataFrame(result.trajectory, columns=parameter_labels(template))
    trajectories.insert(0, "iteration", iterations)
    _write_frame(out / "mf_trajectories.csv", trajectories)

    # score the saved file, not the in-memory vector, so the artifact itself is checked
    reloaded = replace(template_controller, kind=ControllerKind.FUZZY_TUNED, fis=load_fis(fis_path))
    log = run_simulation(config.plant, reloaded, config.scenario, settings)
    reevaluated = cost_from_log(log, config.plant.v_nominal, config.tune.battery_weight, config.tune.battery_exponent)

    _write_json(out / "tune_summary.json", {
        "regime": config.scenario.regime.value,
        "seed": swarm.seed,
        "population": swarm.population,
        "iterations": swarm.iterations,
        "evaluations": result.evaluations,
        "initial_cost": result.initial_cost,
        "tuned_cost": result.best_cost,
        "reevaluated_cost": reevaluated,
        "improved": result.initial_cost is not None and reevaluated <= result.initial_cost,
    })
    print(f"Best cost: {result.best_cost:.6g} (initial FIS: {result.initial_cost:.6g})")
    if plot:
        from plots import plot_convergence, plot_membership_functions, plot_trajectories

        plot_convergence(result.history, out / "convergence.png")
        plot_trajectories(trajectories, out / "mf_trajectories.png")
        plot_membership_functions(template, out / "membership_functions.png", tuned=tuned)
    return tuned


@exit_status
def run_tune(config: RunConfig, plot: bool = False) -> int:
    """PSO tuning of the configured fuzzy controller; writes the tuned FIS and its history."""
    _tune(config, config.controller, config.output_dir, plot)
    return EXIT_OK


# --- compare ---------------------------------------------------------------------------

def _compare_job(job: Tuple[PlantParams, ControllerConfig, ScenarioSpec, SimSettings, Path]) -> Dict[str, float]:
    """One compare run; module level so a process pool can pickle it."""
    plant, controller, scenario, settings, csv_path = job
    log = run_simulation(plant, controller, scenario, settings)
    log.to_csv(csv_path)
    metrics = compute_metrics(log, plant.v_nominal, settings.settle_time)
    return {
        **metrics.to_dict(),
        "soc_b_start": float(log.soc_b[0]),
        "soc_b_end": float(log.soc_b[-1]),
        "soc_u_start": float(log.soc_u[0]),
        "soc_u_end": float(log.soc_u[-1]),
    }


def _regime_scenario(config: RunConfig, regime: Regime) -> ScenarioSpec:
    base = config.scenario
    if base.regime is regime:
        return base
    return make_scenario(
        regime,
        base.seed,
        duration=base.duration,
        soc_b0=base.soc_b0,
        soc_u0=base.soc_u0,
        source_hold=base.source.hold_time,
        load_hold=base.load.hold_time,
    )


def _run_jobs(jobs: Sequence[tuple], workers: int) -> List[Dict[str, float]]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
            return list(executor.map(_compare_job, jobs))
    return [_compare_job(job) for job in jobs]


def _q_verdicts(rows: Sequence[dict], regimes: Sequence[Regime]) -> Dict[str, dict]:
    verdicts = {}
    for regime in regimes:
        q = {row["controller"]: row["q_battery"] for row in rows if row["scenario"] == regime.value}
        q_pi, q_init, q_tuned = (q[kind.value] for kind in COMPARE_ORDER)
        verdicts[regime.value] = {
            "q_pi": q_pi,
            "q_fuzzy_initial": q_init,
            "q_fuzzy_tuned": q_tuned,
            "ordered": q_tuned < q_init < q_pi,
            "separated": q_tuned <= SEPARATION_FACTOR * q_pi,
        }
    return verdicts


def _transfer_section(results: Dict[str, dict]) -> dict:
    section = {}
    for kind, metrics in results.items():
        delta_b = metrics["soc_b_end"] - metrics["soc_b_start"]
        delta_u = metrics["soc_u_end"] - metrics["soc_u_start"]
        section[kind] = {
            "soc_b_start": metrics["soc_b_start"],
            "soc_b_end": metrics["soc_b_end"],
            "soc_u_start": metrics["soc_u_start"],
            "soc_u_end": metrics["soc_u_end"],
            "delta_soc_b": delta_b,
            "delta_soc_u": delta_u,
            "transfers": delta_b > 0.0 and delta_u < 0.0,
        }
    initial = section[ControllerKind.FUZZY_INITIAL.value]
    tuned = section[ControllerKind.FUZZY_TUNED.value]
    section["fuzzy_transfers"] = initial["transfers"] and tuned["transfers"]
    section["tuned_at_least_initial"] = tuned["soc_b_end"] >= initial["soc_b_end"]
    return section


def _plot_compare(config: RunConfig, controllers: Dict[ControllerKind, ControllerConfig],
                  scenario_labels: Sequence[str], q_verdicts: Dict[str, dict]) -> None:
    from plots import plot_compare_overlays, plot_membership_functions, plot_q_table

    out = config.output_dir
    plot_q_table(
        {r: {k: v for k, v in verdict.items() if k.startswith("q_")} for r, verdict in q_verdicts.items()},
        out / "q_table.png",
    )
    for label in dict.fromkeys(scenario_labels):
        logs = {
            kind.value: RunLog.from_csv(out / "compare" / f"{kind.value}_{label}.csv")
            for kind in controllers
        }
        plot_compare_overlays(logs, out / "compare" / f"overlay_{label}.png", config.plant.v_nominal, title=label)
    plot_membership_functions(
        controllers[ControllerKind.FUZZY_INITIAL].fis,
        out / "membership_functions.png",
        tuned=controllers[ControllerKind.FUZZY_TUNED].fis,
    )


@exit_status
def run_compare(config: RunConfig, plot: bool = False, tune_inline: bool = False) -> int:
    """PI, initial fuzzy and tuned fuzzy on identical scenarios; writes the report and Q table."""
    out = config.output_dir
    if tune_inline:
        tuned_fis = _tune(config, controller_variant(config, ControllerKind.FUZZY_INITIAL), out / "tune", plot)
    else:
        if config.fis_path is None:
            raise MissingFisError("compare needs --fis <tuned_fis.json> or --tune-inline")
        tuned_fis = None
    controllers = {
        kind: controller_variant(config, kind, fis=tuned_fis if kind is ControllerKind.FUZZY_TUNED else None)
        for kind in COMPARE_ORDER
    }

    regimes = config.compare.regimes
    labels, jobs = [], []
    for regime in regimes:
        scenario = _regime_scenario(config, regime)
        for kind, controller in controllers.items():
            labels.append((kind.value, regime.value))
            jobs.append((config.plant, controller, scenario, config.sim, out / "compare" / f"{kind.value}_{regime.value}.csv"))
    if config.compare.run_transfer:
        plant = config.plant
        transfer = make_transfer_scenario(
            config.scenario.seed,
            duration=config.compare.transfer_duration,
            ballast_power=plant.v_nominal ** 2 / plant.ballast_resistor,
        )
        for kind, controller in controllers.items():
            labels.append((kind.value, "transfer"))
            jobs.append((plant, controller, transfer, config.sim, out / "compare" / f"{kind.value}_transfer.csv"))

    logger.info(f" Running {len(jobs)} comparison simulations with {config.workers} worker(s)")
    results = _run_jobs(jobs, config.workers)

    rows, transfer_results = [], {}
    for (kind, scenario_label), metrics in zip(labels, results):
        if scenario_label == "transfer":
            transfer_results[kind] = metrics
            continue
        row = {"controller": kind, "scenario": scenario_label}
        row.update({f.name: metrics[f.name] for f in fields(MetricsReport)})
        row["regulation_ok"] = metrics["regulation_ok_fraction"] >= REGULATION_TARGET
        rows.append(row)

    q_verdicts = _q_verdicts(rows, regimes)
    report = {
        "seed": config.scenario.seed,
        "duration": config.scenario.duration,
        "dt": config.sim.dt,
        "runs": rows,
        "q_ordering": q_verdicts,
        "q_ordering_holds": all(v["ordered"] for v in q_verdicts.values()),
        "q_separation_holds": all(v["separated"] for v in q_verdicts.values()),
        "all_regulated": all(row["regulation_ok"] for row in rows),
    }
    if transfer_results:
        report["transfer"] = _transfer_section(transfer_results)
    _write_json(out / "compare_report.json", report)

    q_table = pd.DataFrame([
        {"scenario": regime, **{key[2:]: value for key, value in verdict.items() if key.startswith("q_")}}
        for regime, verdict in q_verdicts.items()
    ])
    _write_frame(out / "q_table.csv", q_table)

    for regime, verdict in q_verdicts.items():
        logger.info(
            f" {regime}: Q_pi={verdict['q_pi']:.4g}, Q_initial={verdict['q_fuzzy_initial']:.4g}, "
            f"Q_tuned={verdict['q_fuzzy_tuned']:.4g}, ordered={verdict['ordered']}"
        )
    if plot:
        _plot_compare(config, controllers, [label for _, label in labels], q_verdicts)
    return EXIT_OK


# --- command line ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="scenario and swarm seed")
    common.add_argument("--dt", type=float, help="integration step in seconds (<= 1e-3)")
    common.add_argument("--controller", choices=[kind.value for kind in ControllerKind])
    common.add_argument("--fis", type=Path, help="tuned FIS JSON file")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--plot", action="store_true", help="also write PNG figures")

    parser = argparse.ArgumentParser(description="Fuzzy energy management of a DC microgrid")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("simulate", parents=[common], help="run one closed-loop simulation")
    commands.add_parser("tune", parents=[common], help="tune the fuzzy output MFs with PSO")
    compare = commands.add_parser("compare", parents=[common], help="compare PI, initial and tuned fuzzy control")
    compare.add_argument("--tune-inline", action="store_true", help="tune first instead of reading --fis")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK

    _configure_logging(args.log_level or os.getenv(ENV_LOG_LEVEL, "INFO"))
    try:
        config = load_run_config(args.config, fis_path=args.fis)
        config = apply_overrides(
            config,
            seed=args.seed,
            dt=args.dt,
            output_dir=args.out,
            controller=args.controller,
            log_level=args.log_level,
        )
    except Exception as e:
        return exit_code_for(e)
    logging.getLogger().setLevel(getattr(logging, config.log_level, logging.INFO))

    logger.info(f" {args.command}: output directory {config.output_dir}")
    if args.command == "simulate":
        return run_simulate(config, plot=args.plot)
    if args.command == "tune":
        return run_tune(config, plot=args.plot)
    return run_compare(config, plot=args.plot, tune_inline=args.tune_inline)


if __name__ == "__main__":
    sys.exit(main())
