"""
Bus-voltage controllers: the cascaded PI baseline and the fuzzy stabilizer.

Both controllers split into an outer layer that turns the bus-voltage error into
per-branch current references and the shared inner layer that turns references into
converter duties. The outer layer runs at the control period, the inner one at every
integration step.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Dict, Mapping, NamedTuple, Optional, Tuple

import numpy as np

import plant_kernels as kernels
from errors import InvalidParameterError, MissingFisError
from fuzzy_engine import (
    DEFAULT_RESOLUTION,
    FisDefinition,
    FuzzyInferenceEngine,
    FuzzyVariable,
    MembershipFunction,
    Rule,
    RuleClause,
)
from microgrid_plant import (
    BranchCommands,
    PlantParams,
    PlantState,
    soc_battery,
    soc_ultracap,
)
from pi_loop import PiGains, PiState, pi_step

logger = logging.getLogger(__name__)

RULE_TABLE_PATH = Path(__file__).resolve().parent / "initial_rule_table.json"
HALF_POINT_FACTOR = math.sqrt(2.0 * math.log(2.0))


class ControllerKind(str, Enum):
    PI = "pi"
    FUZZY_INITIAL = "fuzzy_initial"
    FUZZY_TUNED = "fuzzy_tuned"

    @property
    def is_fuzzy(self) -> bool:
        return self is not ControllerKind.PI


@dataclass(frozen=True)
class NormalizationScales:
    e_scale: float = 4.0
    ie_scale: float = 0.4
    i_b_base: float = 20.0
    i_u_base: float = 40.0
    i_o_base: float = 20.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value) or value <= 0.0:
                raise InvalidParameterError(f"scales.{name} must be finite and > 0, got {value}")


def _default_inner_gains() -> PiGains:
    return PiGains(kp=0.005, ki=0.5, output_limits=(-0.95, 0.95))


@dataclass(frozen=True)
class InnerLoopGains:
    battery: PiGains = field(default_factory=_default_inner_gains)
    ultracap: PiGains = field(default_factory=_default_inner_gains)
    ovd: PiGains = field(default_factory=_default_inner_gains)


@dataclass(frozen=True)
class ControllerConfig:
    kind: ControllerKind = ControllerKind.FUZZY_INITIAL
    pi_outer: PiGains = field(default_factory=lambda: PiGains(kp=2.0, ki=20.0, output_limits=(-20.0, 20.0)))
    pi_inner: InnerLoopGains = field(default_factory=InnerLoopGains)
    scales: NormalizationScales = field(default_factory=NormalizationScales)
    fis: Optional[FisDefinition] = None
    uc_filter_tau: float = 0.5
    saturation_soc: float = 0.98
    engine: Optional[FuzzyInferenceEngine] = field(default=None, init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ControllerKind(self.kind))
        if self.uc_filter_tau <= 0.0:
            raise InvalidParameterError(f"uc_filter_tau must be > 0, got {self.uc_filter_tau}")
        if not 0.0 < self.saturation_soc <= 1.0:
            raise InvalidParameterError(f"saturation_soc must lie in (0, 1], got {self.saturation_soc}")
        if not self.kind.is_fuzzy:
            return
        fis = self.fis
        if fis is None:
            if self.kind is ControllerKind.FUZZY_TUNED:
                raise MissingFisError("a fuzzy_tuned controller needs a tuned FIS")
            fis = build_initial_fis()
            object.__setattr__(self, "fis", fis)
        object.__setattr__(self, "engine", FuzzyInferenceEngine(fis))

    @cached_property
    def inner_gain_table(self) -> np.ndarray:
        gains = self.pi_inner
        return kernels.gain_table(gains.battery, gains.ultracap, gains.ovd)


class BranchReferences(NamedTuple):
    i_b: float = 0.0
    i_u: float = 0.0
    i_o: float = 0.0


class ControllerState(NamedTuple):
    outer: PiState = PiState()
    uc_lowpass: float = 0.0
    error_integral: float = 0.0
    battery: PiState = PiState()
    ultracap: PiState = PiState()
    ovd: PiState = PiState()


# --- initial expert FIS ----------------------------------------------------------------

def _table_mf(entry: Mapping) -> MembershipFunction:
    center = float(entry["center"])
    if "half_point" in entry:
        sigma = abs(float(entry["half_point"]) - center) / HALF_POINT_FACTOR
    else:
        sigma = float(entry["sigma"])
    return MembershipFunction(str(entry["label"]), center, sigma)


def _table_clause(entry) -> RuleClause:
    negated = bool(entry[2]) if len(entry) > 2 else False
    return RuleClause(str(entry[0]), str(entry[1]), negated)


@lru_cache(maxsize=8)
def _load_rule_table(path: str, resolution: int) -> FisDefinition:
    with open(path, "r", encoding="utf-8") as f:
        table = json.load(f)

    def variables(key):
        return tuple(
            FuzzyVariable(v["name"], tuple(v["universe"]), tuple(_table_mf(mf) for mf in v["mfs"]))
            for v in table[key]
        )

    rules = tuple(
        Rule(
            antecedents=tuple(_table_clause(c) for c in entry["if"]),
            consequents=tuple((str(name), str(label)) for name, label in entry["then"]),
            weight=float(entry.get("weight", 1.0)),
            note=entry.get("note", ""),
        )
        for entry in table["rules"]
    )
    fis = FisDefinition(variables("inputs"), variables("outputs"), rules, resolution)
    logger.info(f" Initial FIS loaded: {len(fis.rules)} rules from {Path(path).name}")
    return fis


def build_initial_fis(resolution: int = DEFAULT_RESOLUTION, table_path: Optional[Path] = None) -> FisDefinition:
    """The hand-built stabilizer FIS: 4 per-unit inputs, 3 per-unit outputs, 20 rules."""
    return _load_rule_table(str(table_path or RULE_TABLE_PATH), int(resolution))


# --- outer layer -----------------------------------------------------------------------

def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def _limit_references(i_b: float, i_u: float, i_o: float, params: PlantParams) -> BranchReferences:
    limits = params.current_limits
    return BranchReferences(
        _clamp(i_b, -limits.i_b_max, limits.i_b_max),
        _clamp(i_u, -limits.i_u_max, limits.i_u_max),
        _clamp(i_o, 0.0, limits.i_o_max),
    )


def pi_outer_references(
    meas: PlantState,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    period: float,
) -> Tuple[BranchReferences, ControllerState]:
    """
    One voltage PI shared by the three branches: the battery follows the full
    output, the UC follows its high-pass part, and the OVD only takes surplus once
    both storages are saturated.
    """
    error = params.v_nominal - meas.v_bus
    output, outer = pi_step(state.outer, cfg.pi_outer, error, period)
    alpha = period / (cfg.uc_filter_tau + period)
    lowpass = state.uc_lowpass + alpha * (output - state.uc_lowpass)

    saturated = (
        soc_battery(meas.q_batt, params) >= cfg.saturation_soc
        and soc_ultracap(meas.v_uc, params) >= cfg.saturation_soc
    )
    if output < 0.0 and saturated:
        refs = _limit_references(0.0, 0.0, -output, params)
    else:
        refs = _limit_references(output, output - lowpass, 0.0, params)
    return refs, state._replace(outer=outer, uc_lowpass=lowpass)


def fuzzy_inputs(meas: PlantState, cfg: ControllerConfig, error_integral: float, params: PlantParams) -> Dict[str, float]:
    scales = cfg.scales
    e = (params.v_nominal - meas.v_bus) / scales.e_scale
    return {
        "e": _clamp(e, -1.0, 1.0),
        "ie": _clamp(error_integral / scales.ie_scale, -1.0, 1.0),
        "soc_b": soc_battery(meas.q_batt, params),
        "soc_u": soc_ultracap(meas.v_uc, params),
    }


def denormalize_outputs(outputs: Mapping[str, float], scales: NormalizationScales) -> BranchReferences:
    """Per-unit FIS outputs to amps; positive means current injected into the bus."""
    return BranchReferences(
        outputs["i_b"] * scales.i_b_base,
        outputs["i_u"] * scales.i_u_base,
        max(0.0, outputs["i_o"]) * scales.i_o_base,
    )


def fuzzy_references(
    meas: PlantState,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    period: float,
) -> Tuple[BranchReferences, ControllerState]:
    if cfg.engine is None:
        raise InvalidParameterError(f"controller kind {cfg.kind.value} has no fuzzy engine")
    limit = cfg.scales.ie_scale
    error = params.v_nominal - meas.v_bus
    integral = _clamp(state.error_integral + error * period, -limit, limit)
    outputs = cfg.engine.infer(fuzzy_inputs(meas, cfg, integral, params))
    refs = denormalize_outputs(outputs, cfg.scales)
    return _limit_references(refs.i_b, refs.i_u, refs.i_o, params), state._replace(error_integral=integral)


def outer_references(
    meas: PlantState,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    period: float,
) -> Tuple[BranchReferences, ControllerState]:
    if cfg.kind.is_fuzzy:
        return fuzzy_references(meas, cfg, state, params, period)
    return pi_outer_references(meas, cfg, state, params, period)


# --- inner layer -----------------------------------------------------------------------

def inner_current_duties(
    meas: PlantState,
    refs: BranchReferences,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    dt: float,
) -> Tuple[BranchCommands, ControllerState]:
    """Feedforward from the averaged boost law plus a PI on the current error."""
    if dt <= 0.0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    d_b, d_u, d_o, int_b, int_u, int_o, out_b, out_u, out_o = kernels.inner_duties(
        float(meas.v_bus), float(meas.i_battery), float(meas.i_ultracap), float(meas.i_ovd),
        float(meas.q_batt), float(meas.v_uc), float(refs.i_b), float(refs.i_u), float(refs.i_o),
        float(state.battery.integral), float(state.ultracap.integral), float(state.ovd.integral),
        cfg.inner_gain_table, float(dt), params.kernel_constants,
    )
    commands = BranchCommands(0.0, d_b, d_u, d_o)
    return commands, state._replace(
        battery=PiState(int_b, out_b), ultracap=PiState(int_u, out_u), ovd=PiState(int_o, out_o),
    )


# --- composite controllers -------------------------------------------------------------

def pi_cascade_control(
    meas: PlantState,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    dt: float,
) -> Tuple[BranchCommands, BranchReferences, ControllerState]:
    if cfg.kind is not ControllerKind.PI:
        raise InvalidParameterError(f"pi_cascade_control needs kind 'pi', got {cfg.kind.value}")
    refs, state = pi_outer_references(meas, cfg, state, params, dt)
    commands, state = inner_current_duties(meas, refs, cfg, state, params, dt)
    return commands, refs, state


def fuzzy_control(
    meas: PlantState,
    cfg: ControllerConfig,
    state: ControllerState,
    params: PlantParams,
    dt: float,
) -> Tuple[BranchCommands, BranchReferences, ControllerState]:
    if not cfg.kind.is_fuzzy:
        raise InvalidParameterError(f"fuzzy_control needs a fuzzy kind, got {cfg.kind.value}")
    refs, state = fuzzy_references(meas, cfg, state, params, dt)
    commands, state = inner_current_duties(meas, refs, cfg, state, params, dt)
    return commands, refs, state
