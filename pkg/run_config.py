"""
Run configuration: one JSON document with every constant optional, plus environment
overrides read after ``load_dotenv()``.

Environment variables:
    MICROGRID_OUTPUT_DIR  output directory (overrides "output_dir")
    MICROGRID_LOG_LEVEL   logging level name (default INFO)
    MICROGRID_WORKERS     process count for PSO and compare runs (default 1, serial)
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

from controllers import ControllerConfig, ControllerKind, InnerLoopGains, NormalizationScales, build_initial_fis
from errors import ConfigError, InvalidParameterError, MissingFisError
from fuzzy_engine import DEFAULT_RESOLUTION, FisDefinition, load_fis
from microgrid_plant import PlantParams
from pi_loop import PiGains
from pso_tuner import SwarmConfig
from scenarios import Regime, ScenarioSpec, make_scenario
from simulation import SimSettings

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "MICROGRID_OUTPUT_DIR"
ENV_LOG_LEVEL = "MICROGRID_LOG_LEVEL"
ENV_WORKERS = "MICROGRID_WORKERS"


@dataclass(frozen=True)
class TuneSettings:
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    dt: float = 1e-3
    battery_weight: float = 0.1
    battery_exponent: int = 2


@dataclass(frozen=True)
class CompareSettings:
    regimes: Tuple[Regime, ...] = (Regime.SURPLUS, Regime.DEFICIT, Regime.BALANCED)
    transfer_duration: float = 20.0
    run_transfer: bool = True


@dataclass(frozen=True)
class RunConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    scenario: ScenarioSpec = field(default_factory=lambda: make_scenario(Regime.BALANCED, 0))
    sim: SimSettings = field(default_factory=SimSettings)
    tune: TuneSettings = field(default_factory=TuneSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    output_dir: Path = Path("results")
    fis_path: Optional[Path] = None
    workers: int = 1
    log_level: str = "INFO"

    def tuning_settings(self) -> SimSettings:
        """Simulation settings for PSO candidates: the run settings at the tuning dt."""
        return replace(self.sim, dt=self.tune.dt)


# --- section parsers -------------------------------------------------------------------

def _section(data: Mapping, key: str) -> dict:
    value = data.get(key, {}) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section {key!r} must be an object")
    return dict(value)


def _controller_from_dict(data: Mapping, fis_path: Optional[Path]) -> ControllerConfig:
    data = dict(data)
    kind = ControllerKind(data.pop("kind", ControllerKind.FUZZY_INITIAL.value))
    data.pop("fis_path", None)
    resolution = int(data.pop("defuzz_resolution", DEFAULT_RESOLUTION))
    kwargs = {"kind": kind}
    if "pi_outer" in data:
        kwargs["pi_outer"] = PiGains.from_dict(data.pop("pi_outer"))
    if "pi_inner" in data:
        inner = data.pop("pi_inner")
        kwargs["pi_inner"] = InnerLoopGains(**{name: PiGains.from_dict(g) for name, g in inner.items()})
    if "scales" in data:
        kwargs["scales"] = NormalizationScales(**data.pop("scales"))
    for key in ("uc_filter_tau", "saturation_soc"):
        if key in data:
            kwargs[key] = float(data.pop(key))
    if data:
        raise ConfigError(f"unknown controller settings: {sorted(data)}")

    if kind is ControllerKind.FUZZY_INITIAL:
        kwargs["fis"] = build_initial_fis(resolution)
    elif kind is ControllerKind.FUZZY_TUNED:
        kwargs["fis"] = read_tuned_fis(fis_path)
    return ControllerConfig(**kwargs)


def read_tuned_fis(path: Optional[Path]) -> FisDefinition:
    if path is None:
        raise MissingFisError("no tuned FIS given (use --fis or controller.fis_path)")
    path = Path(path)
    if not path.is_file():
        raise MissingFisError(f"tuned FIS file not found: {path}")
    return load_fis(path)


SCENARIO_KEYS = {
    "regime", "seed", "duration", "initial_soc_b", "initial_soc_u",
    "source_range", "load_range", "source_hold", "load_hold",
}


def _scenario_from_dict(data: Mapping) -> ScenarioSpec:
    unknown = set(data) - SCENARIO_KEYS
    if unknown:
        _reject("scenario", {key: data[key] for key in unknown})
    return make_scenario(
        data.get("regime", Regime.BALANCED.value),
        int(data.get("seed", 0)),
        duration=float(data.get("duration", 150.0)),
        soc_b0=float(data.get("initial_soc_b", 0.5)),
        soc_u0=float(data.get("initial_soc_u", 0.5)),
        source_range=data.get("source_range"),
        load_range=data.get("load_range"),
        source_hold=float(data.get("source_hold", 10.0)),
        load_hold=float(data.get("load_hold", 3.0)),
    )


def _reject(section: str, data: Mapping):
    raise ConfigError(f"unknown {section} settings: {sorted(data)}")


def _tune_from_dict(data: Mapping) -> TuneSettings:
    data = dict(data)
    swarm = SwarmConfig(**data.pop("swarm", {}))
    settings = TuneSettings(
        swarm=swarm,
        dt=float(data.pop("dt", 1e-3)),
        battery_weight=float(data.pop("battery_weight", 0.1)),
        battery_exponent=int(data.pop("battery_exponent", 2)),
    )
    if data:
        _reject("tune", data)
    if settings.battery_exponent not in (1, 2):
        raise ConfigError(f"tune.battery_exponent must be 1 or 2, got {settings.battery_exponent}")
    return settings


def _compare_from_dict(data: Mapping) -> CompareSettings:
    data = dict(data)
    settings = CompareSettings(
        regimes=tuple(Regime(r) for r in data.pop("regimes", [r.value for r in Regime])),
        transfer_duration=float(data.pop("transfer_duration", 20.0)),
        run_transfer=bool(data.pop("run_transfer", True)),
    )
    if data:
        _reject("compare", data)
    return settings


def run_config_from_dict(
    data: Mapping,
    base_dir: Path = Path("."),
    env: Optional[Mapping[str, str]] = None,
    fis_path: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """``fis_path`` (from the command line) wins over controller.fis_path."""
    env = os.environ if env is None else env
    try:
        controller_section = _section(data, "controller")
        if fis_path is not None:
            fis_path = Path(fis_path)
        elif controller_section.get("fis_path"):
            fis_path = base_dir / controller_section["fis_path"]

        output_dir = Path(env.get(ENV_OUTPUT_DIR) or data.get("output_dir", "results"))
        if not output_dir.is_absolute() and not env.get(ENV_OUTPUT_DIR):
            output_dir = base_dir / output_dir

        config = RunConfig(
            plant=PlantParams.from_dict(_section(data, "plant")),
            controller=_controller_from_dict(controller_section, fis_path),
            scenario=_scenario_from_dict(_section(data, "scenario")),
            sim=SimSettings(**_section(data, "sim")),
            tune=_tune_from_dict(_section(data, "tune")),
            compare=_compare_from_dict(_section(data, "compare")),
            output_dir=output_dir,
            fis_path=fis_path,
            workers=int(env.get(ENV_WORKERS) or data.get("workers", 1)),
            log_level=str(env.get(ENV_LOG_LEVEL) or data.get("log_level", "INFO")).upper(),
        )
    except (InvalidParameterError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}")
    if config.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {config.workers}")
    return config


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    env: Optional[Mapping[str, str]] = None,
    fis_path: Optional[Union[str, Path]] = None,
) -> RunConfig:
    if path is None:
        return run_config_from_dict({}, env=env, fis_path=fis_path)
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    logger.info(f" Loaded run config from {path}")
    return run_config_from_dict(data, base_dir=path.parent, env=env, fis_path=fis_path)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    dt: Optional[float] = None,
    output_dir: Optional[Union[str, Path]] = None,
    controller: Optional[str] = None,
    fis_path: Optional[Union[str, Path]] = None,
    log_level: Optional[str] = None,
) -> RunConfig:
    """Apply command-line flags on top of file and environment settings."""
    try:
        if seed is not None:
            config = replace(
                config,
                scenario=config.scenario.with_seed(seed),
                tune=replace(config.tune, swarm=replace(config.tune.swarm, seed=seed)),
            )
        if dt is not None:
            config = replace(config, sim=replace(config.sim, dt=dt), tune=replace(config.tune, dt=dt))
        if output_dir is not None:
            config = replace(config, output_dir=Path(output_dir))
        if log_level is not None:
            config = replace(config, log_level=log_level.upper())
        if fis_path is not None:
            config = replace(config, fis_path=Path(fis_path))
        kind = ControllerKind(controller) if controller is not None else config.controller.kind
        if controller is not None or (fis_path is not None and kind is ControllerKind.FUZZY_TUNED):
            config = replace(config, controller=controller_variant(config, kind))
    except (InvalidParameterError, ValueError) as e:
        raise ConfigError(f"invalid override: {e}")
    return config


def controller_variant(config: RunConfig, kind: Union[ControllerKind, str], fis: Optional[FisDefinition] = None) -> ControllerConfig:
    """The configured controller switched to ``kind``, sharing every gain and scale."""
    kind = ControllerKind(kind)
    if kind is ControllerKind.PI:
        fis = None
    elif fis is None:
        if kind is ControllerKind.FUZZY_TUNED:
            fis = read_tuned_fis(config.fis_path)
        else:
            resolution = config.controller.fis.defuzz_resolution if config.controller.fis else DEFAULT_RESOLUTION
            fis = build_initial_fis(resolution)
    return replace(config.controller, kind=kind, fis=fis)
