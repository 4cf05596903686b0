"""
Particle swarm tuning of the fuzzy controller's output membership functions.

Only the (center, sigma) pairs of the output sets move; inputs and rules stay as
built. Every candidate is scored by a closed-loop simulation with

    cost = integral (v_bus - v_nominal)^2 dt + weight * integral |i_batt|^p dt

and a diverged or invalid candidate scores a fixed penalty so the swarm keeps going.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from controllers import ControllerConfig, ControllerKind
from errors import FisEncodingError, InvalidParameterError, NumericalDivergenceError
from fuzzy_engine import FisDefinition, MembershipFunction
from microgrid_plant import PlantParams
from scenarios import RunLog, ScenarioSpec, trapezoid
from simulation import SimSettings, run_simulation

logger = logging.getLogger(__name__)

DIVERGENCE_PENALTY = 1e9
SIGMA_BOUNDS = (0.02, 1.0)
# outputs whose negative half is dropped when they are turned into current references
ONE_SIDED_OUTPUTS = ("i_o",)


@dataclass(frozen=True)
class SwarmConfig:
    population: int = 60
    iterations: int = 100
    inertia: float = 0.7298
    cognitive: float = 1.4962
    social: float = 1.4962
    velocity_cap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.population < 1:
            raise InvalidParameterError(f"population must be >= 1, got {self.population}")
        if self.iterations < 1:
            raise InvalidParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.velocity_cap <= 0.0:
            raise InvalidParameterError(f"velocity_cap must be > 0, got {self.velocity_cap}")


@dataclass(frozen=True)
class Bounds:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if len(self.lower) != len(self.upper) or not self.lower:
            raise InvalidParameterError("bounds need matching, non-empty lower and upper vectors")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if not lo < hi:
                raise InvalidParameterError(f"bound {i} must satisfy lo < hi, got [{lo}, {hi}]")

    @classmethod
    def uniform(cls, lo: float, hi: float, dimensions: int) -> "Bounds":
        return cls((lo,) * dimensions, (hi,) * dimensions)

    def __len__(self) -> int:
        return len(self.lower)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.lower), np.array(self.upper)


@dataclass
class TuneResult:
    best_params: np.ndarray
    best_cost: float
    history: List[float]
    evaluations: int
    trajectory: np.ndarray = field(repr=False)
    initial_cost: Optional[float] = None


# --- encoding --------------------------------------------------------------------------

def encode_fis(fis: FisDefinition) -> np.ndarray:
    """Output MF parameters flattened as (center, sigma) pairs in declaration order."""
    values = []
    for variable in fis.outputs:
        for mf in variable.mfs:
            values.extend((mf.center, mf.sigma))
    return np.array(values, dtype=float)


def parameter_labels(fis: FisDefinition) -> List[str]:
    labels = []
    for variable in fis.outputs:
        for mf in variable.mfs:
            labels.extend((f"{variable.name}.{mf.label}.center", f"{variable.name}.{mf.label}.sigma"))
    return labels


def decode_fis(template: FisDefinition, params: Sequence[float]) -> FisDefinition:
    params = np.asarray(params, dtype=float)
    expected = 2 * sum(len(v.mfs) for v in template.outputs)
    if params.shape != (expected,):
        raise FisEncodingError(f"expected {expected} output MF parameters, got shape {params.shape}")
    fis = template
    position = 0
    for variable in template.outputs:
        mfs = []
        for mf in variable.mfs:
            mfs.append(MembershipFunction(mf.label, float(params[position]), float(params[position + 1])))
            position += 2
        fis = fis.with_output_mfs(variable.name, mfs)
    return fis


def default_bounds(
    template: FisDefinition,
    sigma_bounds: Tuple[float, float] = SIGMA_BOUNDS,
    one_sided: Sequence[str] = ONE_SIDED_OUTPUTS,
) -> Bounds:
    """Centers inside each output universe (its non-negative half for one-sided outputs), widths in ``sigma_bounds``."""
    lower, upper = [], []
    for variable in template.outputs:
        lo, hi = variable.universe
        if variable.name in one_sided:
            lo = max(lo, 0.0)
        for _ in variable.mfs:
            lower.extend((lo, sigma_bounds[0]))
            upper.extend((hi, sigma_bounds[1]))
    return Bounds(tuple(lower), tuple(upper))


# --- objective -------------------------------------------------------------------------

def cost_from_log(log: RunLog, v_nominal: float = 100.0, battery_weight: float = 0.1, exponent: int = 2) -> float:
    if exponent not in (1, 2):
        raise InvalidParameterError(f"battery exponent must be 1 or 2, got {exponent}")
    if len(log) < 2:
        return 0.0
    voltage_term = trapezoid((log.v_bus - v_nominal) ** 2, log.t)
    battery_term = trapezoid(np.abs(log.i_batt) ** exponent, log.t)
    return float(voltage_term + battery_weight * battery_term)


class TuningObjective:
    """Picklable cost function of a ParamVector, safe to fan out over processes."""

    def __init__(
        self,
        template: FisDefinition,
        plant: PlantParams,
        controller: ControllerConfig,
        scenario: ScenarioSpec,
        settings: SimSettings,
        battery_weight: float = 0.1,
        exponent: int = 2,
    ):
        self.template = template
        self.plant = plant
        self.controller = controller
        self.scenario = scenario
        self.settings = settings
        self.battery_weight = battery_weight
        self.exponent = exponent

    def controller_for(self, params: Sequence[float]) -> ControllerConfig:
        fis = decode_fis(self.template, params)
        return replace(self.controller, kind=ControllerKind.FUZZY_TUNED, fis=fis)

    def __call__(self, params: Sequence[float]) -> float:
        try:
            log = run_simulation(self.plant, self.controller_for(params), self.scenario, self.settings)
        except NumericalDivergenceError as e:
            logger.warning(f" Candidate diverged at t={e.time:.4f} s, penalised")
            return DIVERGENCE_PENALTY
        except InvalidParameterError as e:
            logger.warning(f" Candidate rejected: {e}")
            return DIVERGENCE_PENALTY
        cost = cost_from_log(log, self.plant.v_nominal, self.battery_weight, self.exponent)
        return cost if math.isfinite(cost) else DIVERGENCE_PENALTY


# --- swarm -----------------------------------------------------------------------------

def _evaluate(objective: Callable, positions: np.ndarray, executor: Optional[ProcessPoolExecutor]) -> np.ndarray:
    rows = [row.copy() for row in positions]
    if executor is None:
        costs = [objective(row) for row in rows]
    else:
        costs = list(executor.map(objective, rows))
    return np.array(costs, dtype=float)


def pso_optimize(
    objective: Callable[[np.ndarray], float],
    bounds: Bounds,
    cfg: SwarmConfig,
    initial: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> TuneResult:
    """
    Global-best PSO. ``initial`` seeds particle 0; the other particles start uniform
    in bounds and every particle starts at rest. All random numbers come from one
    generator on the calling process, so results do not depend on ``workers``.
    """
    lo, hi = bounds.arrays()
    n, d = cfg.population, len(bounds)
    rng = np.random.default_rng(cfg.seed)
    v_max = cfg.velocity_cap * (hi - lo)

    x = lo + (hi - lo) * rng.random((n, d))
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        if initial.shape != (d,):
            raise FisEncodingError(f"initial position has shape {initial.shape}, expected ({d},)")
        x[0] = np.clip(initial, lo, hi)
    velocity = np.zeros((n, d))

    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        costs = _evaluate(objective, x, executor)
        initial_cost = float(costs[0]) if initial is not None else None
        pbest, pbest_cost = x.copy(), costs.copy()
        g = int(np.argmin(pbest_cost))
        gbest, gbest_cost = pbest[g].copy(), float(pbest_cost[g])
        history: List[float] = []
        trajectory = np.empty((cfg.iterations, d))

        for iteration in range(cfg.iterations):
            r1 = rng.random((n, d))
            r2 = rng.random((n, d))
            velocity = (
                cfg.inertia * velocity
                + cfg.cognitive * r1 * (pbest - x)
                + cfg.social * r2 * (gbest - x)
            )
            velocity = np.clip(velocity, -v_max, v_max)
            x = np.clip(x + velocity, lo, hi)
            assert np.all((x >= lo) & (x <= hi)), "particle escaped its bounds"

            costs = _evaluate(objective, x, executor)
            improved = costs < pbest_cost
            pbest[improved] = x[improved]
            pbest_cost[improved] = costs[improved]
            g = int(np.argmin(pbest_cost))
            if pbest_cost[g] < gbest_cost:
                gbest, gbest_cost = pbest[g].copy(), float(pbest_cost[g])

            history.append(gbest_cost)
            trajectory[iteration] = gbest
            logger.info(f" PSO iteration {iteration + 1}/{cfg.iterations}: best cost {gbest_cost:.6g}")
    finally:
        if executor is not None:
            executor.shutdown()

    return TuneResult(
        best_params=gbest,
        best_cost=gbest_cost,
        history=history,
        evaluations=n * (cfg.iterations + 1),
        trajectory=trajectory,
        initial_cost=initial_cost,
    )
