"""
Source/load power scenarios for the three production regimes, the run log every
simulation produces, and the metrics computed from it.

Profiles are piecewise constant. The value of segment ``k`` is a uniform draw from
a PCG64 generator seeded with ``SeedSequence([seed, k])``, so a segment's value does
not depend on how many segments precede it and is the same on every platform.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import EmptyLogError, InvalidParameterError

logger = logging.getLogger(__name__)

trapezoid = getattr(np, "trapezoid", None) or np.trapz

SOURCE_HOLD = 10.0
LOAD_HOLD = 3.0
DEFAULT_DURATION = 150.0

LOG_COLUMNS = (
    "t", "v_bus", "i_batt", "i_uc", "i_ovd", "p_source", "p_load",
    "soc_b", "soc_u", "d_b", "d_u", "d_o", "ref_b", "ref_u", "ref_o",
)


class Regime(str, Enum):
    SURPLUS = "surplus"
    DEFICIT = "deficit"
    BALANCED = "balanced"


# (source range, load range) in watts
REGIME_RANGES = {
    Regime.SURPLUS: ((300.0, 500.0), (100.0, 250.0)),
    Regime.DEFICIT: ((100.0, 250.0), (300.0, 500.0)),
    Regime.BALANCED: ((150.0, 350.0), (150.0, 350.0)),
}


@dataclass(frozen=True)
class ProfileSpec:
    hold_time: float
    power_range: Tuple[float, float]
    seed: int
    duration: float = DEFAULT_DURATION

    def __post_init__(self):
        lo, hi = (float(v) for v in self.power_range)
        object.__setattr__(self, "power_range", (lo, hi))
        if not (math.isfinite(self.hold_time) and self.hold_time > 0.0):
            raise InvalidParameterError(f"hold_time must be > 0, got {self.hold_time}")
        if not (math.isfinite(self.duration) and self.duration > 0.0):
            raise InvalidParameterError(f"duration must be > 0, got {self.duration}")
        if not (0.0 <= lo <= hi and math.isfinite(hi)):
            raise InvalidParameterError(f"power_range must satisfy 0 <= lo <= hi, got {self.power_range}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidParameterError(f"seed must be a non-negative integer, got {self.seed}")

    @property
    def segment_count(self) -> int:
        return max(1, math.ceil(self.duration / self.hold_time - 1e-9))


class PowerProfile:
    """Piecewise-constant power target; the last segment extends past the horizon."""

    def __init__(self, spec: ProfileSpec, values: np.ndarray):
        self.spec = spec
        self.values = values
        self._hold = spec.hold_time
        self._last = len(values) - 1

    def __len__(self) -> int:
        return len(self.values)

    def at(self, t: float) -> float:
        k = int(t // self._hold) if t > 0.0 else 0
        return float(self.values[k if k < self._last else self._last])

    __call__ = at

    def sample(self, times: np.ndarray) -> np.ndarray:
        """``at`` over an array of times."""
        times = np.asarray(times, dtype=float)
        k = np.where(times > 0.0, np.floor_divide(times, self._hold), 0.0).astype(np.int64)
        return self.values[np.minimum(k, self._last)]


def segment_value(seed: int, k: int, power_range: Tuple[float, float]) -> float:
    lo, hi = power_range
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(k)])))
    return lo + (hi - lo) * rng.random()


def generate_profile(spec: ProfileSpec) -> PowerProfile:
    values = np.array([segment_value(spec.seed, k, spec.power_range) for k in range(spec.segment_count)])
    return PowerProfile(spec, values)


@dataclass(frozen=True)
class ScenarioSpec:
    regime: Regime
    source: ProfileSpec
    load: ProfileSpec
    soc_b0: float = 0.5
    soc_u0: float = 0.5
    duration: float = DEFAULT_DURATION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.source.duration != self.duration or self.load.duration != self.duration:
            raise InvalidParameterError("source and load profiles must share the scenario duration")
        for name in ("soc_b0", "soc_u0"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {value}")

    def with_seed(self, seed: int) -> "ScenarioSpec":
        source_seed, load_seed = profile_seeds(seed)
        return replace(
            self,
            seed=seed,
            source=replace(self.source, seed=source_seed),
            load=replace(self.load, seed=load_seed),
        )

    def with_duration(self, duration: float) -> "ScenarioSpec":
        return replace(
            self,
            duration=duration,
            source=replace(self.source, duration=duration),
            load=replace(self.load, duration=duration),
        )


def profile_seeds(seed: int) -> Tuple[int, int]:
    """Source and load use disjoint seed streams derived from the scenario seed."""
    return 2 * int(seed), 2 * int(seed) + 1


def make_scenario(
    regime: Union[Regime, str],
    seed: int,
    duration: float = DEFAULT_DURATION,
    soc_b0: float = 0.5,
    soc_u0: float = 0.5,
    source_range: Optional[Tuple[float, float]] = None,
    load_range: Optional[Tuple[float, float]] = None,
    source_hold: float = SOURCE_HOLD,
    load_hold: float = LOAD_HOLD,
) -> ScenarioSpec:
    try:
        regime = Regime(regime)
    except ValueError:
        raise InvalidParameterError(f"unknown regime {regime!r}; expected one of {[r.value for r in Regime]}")
    default_source, default_load = REGIME_RANGES[regime]
    source_seed, load_seed = profile_seeds(seed)
    return ScenarioSpec(
        regime=regime,
        source=ProfileSpec(source_hold, tuple(source_range or default_source), source_seed, duration),
        load=ProfileSpec(load_hold, tuple(load_range or default_load), load_seed, duration),
        soc_b0=soc_b0,
        soc_u0=soc_u0,
        duration=duration,
        seed=seed,
    )


def make_transfer_scenario(
    seed: int = 0,
    duration: float = 20.0,
    load_power: float = 250.0,
    ballast_power: float = 50.0,
    soc_b0: float = 0.10,
    soc_u0: float = 0.95,
) -> ScenarioSpec:
    """Nearly empty battery, nearly full UC, and a source that just covers load and ballast."""
    source_power = load_power + ballast_power
    return make_scenario(
        Regime.BALANCED,
        seed,
        duration=duration,
        soc_b0=soc_b0,
        soc_u0=soc_u0,
        source_range=(source_power, source_power),
        load_range=(load_power, load_power),
    )


# --- run log ---------------------------------------------------------------------------

class RunLog:
    """Uniformly sampled time series of one closed-loop run (columns in LOG_COLUMNS)."""

    def __init__(self, sample_period: float, columns: Dict[str, np.ndarray]):
        missing = [name for name in LOG_COLUMNS if name not in columns]
        if missing:
            raise InvalidParameterError(f"run log is missing columns {missing}")
        lengths = {len(columns[name]) for name in LOG_COLUMNS}
        if len(lengths) != 1:
            raise InvalidParameterError(f"run log columns differ in length: {sorted(lengths)}")
        self.sample_period = float(sample_period)
        self.columns = {name: np.asarray(columns[name], dtype=float) for name in LOG_COLUMNS}
        t = self.columns["t"]
        if len(t) > 1 and not np.all(np.diff(t) > 0.0):
            raise InvalidParameterError("run log times must be strictly increasing")

    @classmethod
    def from_columns(cls, sample_period: float, **columns) -> "RunLog":
        """Build a log from a subset of columns; the rest are zero-filled."""
        if "t" not in columns:
            n = len(next(iter(columns.values())))
            columns["t"] = np.arange(n) * sample_period
        n = len(columns["t"])
        filled = {name: np.asarray(columns.get(name, np.zeros(n)), dtype=float) for name in LOG_COLUMNS}
        return cls(sample_period, filled)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "RunLog":
        frame = pd.read_csv(path)
        t = frame["t"].to_numpy()
        period = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(period, {name: frame[name].to_numpy() for name in LOG_COLUMNS})

    def __len__(self) -> int:
        return len(self.columns["t"])

    def __getattr__(self, name: str) -> np.ndarray:
        columns = self.__dict__.get("columns")
        if columns is not None and name in columns:
            return columns[name]
        raise AttributeError(name)

    @property
    def duration(self) -> float:
        t = self.columns["t"]
        return float(t[-1] - t[0]) if len(t) else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: self.columns[name] for name in LOG_COLUMNS})

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


# --- metrics ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    q_battery: float
    iae_voltage: float
    iae_pct: float
    max_dev_pct: float
    regulation_ok_fraction: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "q_battery": self.q_battery,
            "iae_voltage": self.iae_voltage,
            "iae_pct": self.iae_pct,
            "max_dev_pct": self.max_dev_pct,
            "regulation_ok_fraction": self.regulation_ok_fraction,
        }


def _require_samples(log: RunLog) -> None:
    if len(log) == 0:
        raise EmptyLogError("metrics need at least one logged sample")


def battery_throughput(log: RunLog) -> float:
    """Charge moved through the battery, the integral of |i_batt| over the run."""
    _require_samples(log)
    if len(log) == 1:
        return 0.0
    return float(trapezoid(np.abs(log.i_batt), log.t))


def voltage_metrics(
    log: RunLog,
    v_nominal: float = 100.0,
    settle_time: float = 1.0,
    band_pct: float = 1.0,
) -> Tuple[float, float, float, float]:
    """(IAE, IAE as % of v_nominal*duration, max deviation %, fraction within band)."""
    _require_samples(log)
    error = np.abs(v_nominal - log.v_bus)
    iae = float(trapezoid(error, log.t)) if len(log) > 1 else 0.0
    duration = log.duration
    iae_pct = iae / (v_nominal * duration) * 100.0 if duration > 0.0 else 0.0

    settled = log.t >= log.t[0] + settle_time
    if not np.any(settled):
        logger.warning(f" Log of {duration:.3f} s is shorter than the {settle_time} s settling window, using all samples")
        settled = np.ones(len(log), dtype=bool)
    deviation_pct = error[settled] / v_nominal * 100.0
    max_dev_pct = float(np.max(deviation_pct))
    ok_fraction = float(np.mean(deviation_pct < band_pct))
    return iae, iae_pct, max_dev_pct, ok_fraction


def compute_metrics(log: RunLog, v_nominal: float = 100.0, settle_time: float = 1.0) -> MetricsReport:
    iae, iae_pct, max_dev_pct, ok_fraction = voltage_metrics(log, v_nominal, settle_time)
    return MetricsReport(battery_throughput(log), iae, iae_pct, max_dev_pct, ok_fraction)
