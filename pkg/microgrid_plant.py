"""
Averaged model of the four-branch DC microgrid.

Branches: a 48 V source behind a boost converter that tracks a power target, the
battery and ultracapacitor behind bidirectional boost converters, and an
over-voltage discharge (OVD) chopper into a resistor. The bus also carries the
stochastic resistive load and a permanent ballast resistor.

Storage-side branch currents are positive when the storage discharges into the bus.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Tuple

import numpy as np

import plant_kernels as kernels
from errors import InvalidParameterError, NumericalDivergenceError
from pi_loop import PiGains, PiState

logger = logging.getLogger(__name__)

MAX_DT = 1e-3


def _require_positive(owner: str, **values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value) or value <= 0.0:
            raise InvalidParameterError(f"{owner}.{name} must be finite and > 0, got {value}")


@dataclass(frozen=True)
class BatteryParams:
    """Fixed DC source in series with a large capacitor: 47.2 V empty, 50.8 V full."""
    v_floor: float = 47.2
    c_equiv: float = 3000.0
    r_int: float = 0.05
    v_span: float = 3.6

    def __post_init__(self):
        _require_positive("battery", v_floor=self.v_floor, c_equiv=self.c_equiv, v_span=self.v_span)
        if not math.isfinite(self.r_int) or self.r_int < 0.0:
            raise InvalidParameterError(f"battery.r_int must be >= 0, got {self.r_int}")

    @property
    def q_max(self) -> float:
        return self.c_equiv * self.v_span


@dataclass(frozen=True)
class UltracapParams:
    c: float = 150.0
    v_rated: float = 54.0
    r_int: float = 0.02

    def __post_init__(self):
        _require_positive("ultracap", c=self.c, v_rated=self.v_rated)
        if not math.isfinite(self.r_int) or self.r_int < 0.0:
            raise InvalidParameterError(f"ultracap.r_int must be >= 0, got {self.r_int}")


@dataclass(frozen=True)
class BranchInductances:
    source: float = 1e-3
    battery: float = 1e-3
    ultracap: float = 1e-3
    # the OVD R/L pole has to stay inside the RK4 stability region at dt = 1e-3
    ovd: float = 5e-3

    def __post_init__(self):
        _require_positive("l_branch", source=self.source, battery=self.battery,
                          ultracap=self.ultracap, ovd=self.ovd)


@dataclass(frozen=True)
class CurrentLimits:
    i_b_max: float = 20.0
    i_u_max: float = 40.0
    i_o_max: float = 20.0

    def __post_init__(self):
        _require_positive("current_limits", i_b_max=self.i_b_max, i_u_max=self.i_u_max, i_o_max=self.i_o_max)


@dataclass(frozen=True)
class PlantParams:
    v_nominal: float = 100.0
    v_source: float = 48.0
    c_bus: float = 0.01
    l_branch: BranchInductances = field(default_factory=BranchInductances)
    battery: BatteryParams = field(default_factory=BatteryParams)
    ultracap: UltracapParams = field(default_factory=UltracapParams)
    ovd_resistor: float = 5.0
    ballast_resistor: float = 200.0
    current_limits: CurrentLimits = field(default_factory=CurrentLimits)
    d_max: float = 0.95
    r_open: float = 1e9
    p_min: float = 1e-6
    source_pi: PiGains = field(default_factory=lambda: PiGains(kp=4e-5, ki=2e-3, output_limits=(-0.95, 0.95)))
    # a bus above this multiple of v_nominal counts as a diverged integration
    runaway_factor: float = 10.0

    def __post_init__(self):
        _require_positive(
            "plant",
            v_nominal=self.v_nominal,
            v_source=self.v_source,
            c_bus=self.c_bus,
            ovd_resistor=self.ovd_resistor,
            ballast_resistor=self.ballast_resistor,
            r_open=self.r_open,
            p_min=self.p_min,
        )
        if not 0.0 < self.d_max < 1.0:
            raise InvalidParameterError(f"plant.d_max must lie in (0, 1), got {self.d_max}")
        if not (math.isfinite(self.runaway_factor) and self.runaway_factor > 1.0):
            raise InvalidParameterError(f"plant.runaway_factor must be finite and > 1, got {self.runaway_factor}")

    @classmethod
    def from_dict(cls, data: dict) -> "PlantParams":
        data = dict(data)
        nested = {
            "l_branch": BranchInductances,
            "battery": BatteryParams,
            "ultracap": UltracapParams,
            "current_limits": CurrentLimits,
        }
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                kwargs[key] = nested[key](**value)
            elif key == "source_pi":
                kwargs[key] = PiGains.from_dict(value)
            else:
                kwargs[key] = float(value)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidParameterError(f"unknown plant parameter: {e}")

    @cached_property
    def kernel_constants(self) -> np.ndarray:
        """The parameters packed for the compiled kernels, indexed by the slots in plant_kernels."""
        c = np.zeros(kernels.PLANT_SLOTS)
        inductance, battery, ultracap = self.l_branch, self.battery, self.ultracap
        c[kernels.V_NOMINAL] = self.v_nominal
        c[kernels.V_SOURCE] = self.v_source
        c[kernels.C_BUS] = self.c_bus
        c[kernels.L_SOURCE] = inductance.source
        c[kernels.L_BATTERY] = inductance.battery
        c[kernels.L_ULTRACAP] = inductance.ultracap
        c[kernels.L_OVD] = inductance.ovd
        c[kernels.V_FLOOR] = battery.v_floor
        c[kernels.C_EQUIV] = battery.c_equiv
        c[kernels.R_BATTERY] = battery.r_int
        c[kernels.Q_MAX] = battery.q_max
        c[kernels.C_ULTRACAP] = ultracap.c
        c[kernels.V_RATED] = ultracap.v_rated
        c[kernels.R_ULTRACAP] = ultracap.r_int
        c[kernels.R_OVD] = self.ovd_resistor
        c[kernels.R_BALLAST] = self.ballast_resistor
        c[kernels.D_MAX] = self.d_max
        c[kernels.R_OPEN] = self.r_open
        c[kernels.P_MIN] = self.p_min
        c[kernels.V_RUNAWAY] = self.runaway_factor * self.v_nominal
        c[kernels.SOURCE_KP] = self.source_pi.kp
        c[kernels.SOURCE_KI] = self.source_pi.ki
        c[kernels.SOURCE_ANTI_WINDUP] = 1.0 if self.source_pi.anti_windup else 0.0
        return c


class PlantState(NamedTuple):
    v_bus: float
    i_source: float = 0.0
    i_battery: float = 0.0
    i_ultracap: float = 0.0
    i_ovd: float = 0.0
    q_batt: float = 0.0
    v_uc: float = 0.0
    t: float = 0.0

    @property
    def i_l(self) -> Tuple[float, float, float, float]:
        return (self.i_source, self.i_battery, self.i_ultracap, self.i_ovd)


class ExogenousInputs(NamedTuple):
    p_source_target: float
    p_load_target: float


class BranchCommands(NamedTuple):
    d_source: float = 0.0
    d_battery: float = 0.0
    d_ultracap: float = 0.0
    d_ovd: float = 0.0


def initial_state(params: PlantParams, soc_b: float, soc_u: float, v_bus: float = None) -> PlantState:
    if not (0.0 <= soc_b <= 1.0 and 0.0 <= soc_u <= 1.0):
        raise InvalidParameterError(f"initial SOCs must lie in [0, 1], got {soc_b}, {soc_u}")
    return PlantState(
        v_bus=params.v_nominal if v_bus is None else v_bus,
        q_batt=soc_b * params.battery.q_max,
        v_uc=soc_u * params.ultracap.v_rated,
    )


# --- storage laws ----------------------------------------------------------------------

def battery_open_circuit_voltage(q_batt: float, params: PlantParams = None) -> float:
    battery = params.battery if params is not None else BatteryParams()
    return battery.v_floor + q_batt / battery.c_equiv


def battery_terminal_voltage(q_batt: float, i_batt: float, params: PlantParams = None) -> float:
    battery = params.battery if params is not None else BatteryParams()
    return battery.v_floor + q_batt / battery.c_equiv - i_batt * battery.r_int


def soc_battery(q_batt: float, params: PlantParams = None) -> float:
    battery = params.battery if params is not None else BatteryParams()
    return q_batt / battery.q_max


def soc_ultracap(v_uc: float, params: PlantParams = None) -> float:
    ultracap = params.ultracap if params is not None else UltracapParams()
    return v_uc / ultracap.v_rated


def load_resistance(p_load_target: float, v_bus: float, params: PlantParams = None) -> float:
    """Equivalent resistance imposed by the load for the current bus voltage."""
    params = params if params is not None else PlantParams()
    if v_bus <= 0.0:
        raise InvalidParameterError(f"load_resistance needs v_bus > 0, got {v_bus}")
    return kernels.load_resistance(float(p_load_target), float(v_bus), params.p_min, params.r_open)


# --- dynamics --------------------------------------------------------------------------

_DIVERGENCE_DETAIL = {
    kernels.NON_FINITE: "non-finite plant state",
    kernels.COLLAPSED: "bus voltage collapsed to {v:.4g} V",
    kernels.RUNAWAY: "bus voltage ran away to {v:.4g} V",
}


def divergence_detail(status: int, v_bus: float) -> str:
    return _DIVERGENCE_DETAIL[status].format(v=v_bus)


def _state_vector(state: PlantState) -> Tuple[float, ...]:
    return tuple(float(x) for x in state[:7])


def step(
    state: PlantState,
    commands: BranchCommands,
    exo: ExogenousInputs,
    params: PlantParams,
    dt: float,
) -> PlantState:
    """Advance the plant by one RK4 step with the commands and load held constant."""
    if not 0.0 < dt <= MAX_DT:
        raise InvalidParameterError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    if not (math.isfinite(exo.p_load_target) and exo.p_load_target >= 0.0
            and math.isfinite(exo.p_source_target) and exo.p_source_target >= 0.0):
        raise InvalidParameterError(f"exogenous powers must be finite and >= 0, got {tuple(exo)}")
    if state.v_bus <= 0.0:
        raise InvalidParameterError(f"step needs v_bus > 0, got {state.v_bus}")

    status, *y = kernels.step_plant(
        *_state_vector(state), *(float(d) for d in commands),
        float(exo.p_load_target), float(dt), params.kernel_constants,
    )
    t = state.t + dt
    if status != kernels.OK:
        raise NumericalDivergenceError(t, divergence_detail(status, y[0]))
    return PlantState(*y, t)


def source_power_tracking_duty(
    state: PlantState,
    p_target: float,
    pi_state: PiState,
    params: PlantParams,
    dt: float,
) -> Tuple[float, PiState]:
    """Boost duty that makes the source deliver ``p_target`` watts."""
    if p_target < 0.0:
        raise InvalidParameterError(f"source power target must be >= 0, got {p_target}")
    if dt <= 0.0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    duty, integral, correction = kernels.source_duty(
        float(state.v_bus), float(state.i_source), float(p_target), float(pi_state.integral),
        float(dt), params.kernel_constants,
    )
    return duty, PiState(integral, correction)


# --- energy accounting -----------------------------------------------------------------

def stored_energy(state: PlantState, params: PlantParams) -> float:
    """Joules held in the bus capacitor, branch inductors and both storages."""
    inductance = params.l_branch
    battery = params.battery
    q = state.q_batt
    return (
        0.5 * params.c_bus * state.v_bus ** 2
        + 0.5 * inductance.source * state.i_source ** 2
        + 0.5 * inductance.battery * state.i_battery ** 2
        + 0.5 * inductance.ultracap * state.i_ultracap ** 2
        + 0.5 * inductance.ovd * state.i_ovd ** 2
        + battery.v_floor * q + q * q / (2.0 * battery.c_equiv)
        + 0.5 * params.ultracap.c * state.v_uc ** 2
    )


def power_flows(state: PlantState, exo: ExogenousInputs, params: PlantParams) -> Tuple[float, float]:
    """(power in from the source, power dissipated in loads and branch resistances)."""
    v = state.v_bus
    r_load = load_resistance(exo.p_load_target, v, params)
    i_o = max(state.i_ovd, 0.0)
    p_in = params.v_source * max(state.i_source, 0.0)
    p_consumed = (
        v * v / r_load
        + v * v / params.ballast_resistor
        + params.ovd_resistor * i_o * i_o
        + params.battery.r_int * state.i_battery ** 2
        + params.ultracap.r_int * state.i_ultracap ** 2
    )
    return p_in, p_consumed


def power_balance_residual(
    state: PlantState,
    commands: BranchCommands,
    exo: ExogenousInputs,
    params: PlantParams,
) -> float:
    """P_in - P_consumed - dE/dt; non-zero only where a hard clamp is acting."""
    r_load = load_resistance(exo.p_load_target, state.v_bus, params)
    dv, di_s, di_b, di_u, di_o, dq, dv_uc = kernels.derivatives(
        *_state_vector(state), *(float(d) for d in commands), r_load, params.kernel_constants,
    )
    inductance = params.l_branch
    d_energy = (
        params.c_bus * state.v_bus * dv
        + inductance.source * state.i_source * di_s
        + inductance.battery * state.i_battery * di_b
        + inductance.ultracap * state.i_ultracap * di_u
        + inductance.ovd * state.i_ovd * di_o
        + battery_open_circuit_voltage(state.q_batt, params) * dq
        + params.ultracap.c * state.v_uc * dv_uc
    )
    p_in, p_consumed = power_flows(state, exo, params)
    return p_in - p_consumed - d_energy
