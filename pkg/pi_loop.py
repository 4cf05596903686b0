"""Discrete PI regulator with clamping anti-windup, shared by every loop in the microgrid."""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

from numba import njit

from errors import InvalidParameterError


@dataclass(frozen=True)
class PiGains:
    kp: float
    ki: float
    output_limits: Tuple[float, float] = (-1.0, 1.0)
    anti_windup: bool = True

    def __post_init__(self):
        lo, hi = (float(v) for v in self.output_limits)
        object.__setattr__(self, "output_limits", (lo, hi))
        for name in ("kp", "ki"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise InvalidParameterError(f"PI {name} must be finite and >= 0, got {value}")
        if not lo < hi:
            raise InvalidParameterError(f"PI output limits must satisfy lo < hi, got {self.output_limits}")

    @classmethod
    def from_dict(cls, data: dict) -> "PiGains":
        return cls(
            kp=float(data["kp"]),
            ki=float(data["ki"]),
            output_limits=tuple(data.get("output_limits", (-1.0, 1.0))),
            anti_windup=bool(data.get("anti_windup", True)),
        )

    def to_dict(self) -> dict:
        return {
            "kp": self.kp,
            "ki": self.ki,
            "output_limits": list(self.output_limits),
            "anti_windup": self.anti_windup,
        }


class PiState(NamedTuple):
    integral: float = 0.0
    last_output: float = 0.0


@njit(cache=True)
def pi_update(integral, kp, ki, lo, hi, anti_windup, error, dt):
    """Scalar PI update returning (clamped output, new integral)."""
    candidate = integral + error * dt
    if anti_windup:
        unclamped = kp * error + ki * candidate
        if (unclamped > hi and error > 0.0) or (unclamped < lo and error < 0.0):
            candidate = integral
        if ki > 0.0:
            candidate = min(max(candidate, lo / ki), hi / ki)

    output = kp * error + ki * candidate
    if output > hi:
        output = hi
    elif output < lo:
        output = lo
    return output, candidate


def pi_step(
    state: PiState,
    gains: PiGains,
    error: float,
    dt: float,
    limits: Optional[Tuple[float, float]] = None,
) -> Tuple[float, PiState]:
    """
    One PI update. ``limits`` overrides ``gains.output_limits`` for loops whose
    admissible range moves with a feedforward term.

    The integral is frozen while the unclamped output sits beyond a limit in the
    direction the error pushes, and it is kept inside [lo/ki, hi/ki].
    """
    if dt <= 0.0:
        raise InvalidParameterError(f"dt must be > 0, got {dt}")
    lo, hi = limits if limits is not None else gains.output_limits
    output, integral = pi_update(
        float(state.integral), float(gains.kp), float(gains.ki), float(lo), float(hi),
        bool(gains.anti_windup), float(error), float(dt),
    )
    return output, PiState(integral, output)
