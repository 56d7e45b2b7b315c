"""Single water tank process with a four-threshold on/off controller.

The tank is filled by an on/off pump and drained through a valve whose
outflow follows Torricelli's law.  Levels are integrated with explicit Euler
and clamped at zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterator


@dataclass(frozen=True)
class PlantParams:
    """Physical constants of the tank (SI units)."""

    pump_max_flow: float = 0.2  # P, m^3/s
    tank_section: float = 1.0  # A, m^2
    outlet_section: float = 0.01  # a, m^2
    gravity: float = 9.81  # g, m/s^2
    dt: float = 0.1  # s

    def __post_init__(self):
        for name in ("pump_max_flow", "tank_section", "outlet_section", "gravity", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")

    def check_fill_dominance(self, thresholds: "Thresholds") -> None:
        """Raise if the pump cannot outrun the drain at the H threshold."""
        drain = self.outlet_section * math.sqrt(2.0 * self.gravity * thresholds.H)
        if not self.pump_max_flow > drain:
            raise ValueError(
                f"pump flow {self.pump_max_flow} does not exceed outflow {drain:.6g} at H={thresholds.H}"
            )

    @property
    def max_step_change(self) -> float:
        """Largest level change one step can produce (the overshoot bound)."""
        return self.pump_max_flow * self.dt / self.tank_section


@dataclass(frozen=True)
class Thresholds:
    LL: float = 0.2
    L: float = 0.5
    H: float = 0.8
    HH: float = 1.2

    def __post_init__(self):
        if not 0 < self.LL < self.L < self.H < self.HH:
            raise ValueError(f"thresholds must satisfy 0 < LL < L < H < HH, got {self}")


@dataclass(frozen=True)
class PlantState:
    """Tank level, the flows used in the last update, and actuator states."""

    level: float = 0.5
    inflow: float = 0.0
    outflow: float = 0.0
    pump: int = 1
    valve: int = 0
    time: float = 0.0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"negative level {self.level!r}")
        if self.pump not in (0, 1) or self.valve not in (0, 1):
            raise ValueError(f"actuators must be binary, got pump={self.pump!r} valve={self.valve!r}")
        if self.pump == 0 and self.inflow != 0:
            raise ValueError("inflow must be zero while the pump is off")
        if self.valve == 0 and self.outflow != 0:
            raise ValueError("outflow must be zero while the valve is closed")


class SafetyStatus(str, enum.Enum):
    OK = "ok"
    UNDERFLOW_ALARM = "underflow_alarm"
    OVERFLOW_ALARM = "overflow_alarm"


def inflow(pump: int, params: PlantParams) -> float:
    if pump not in (0, 1):
        raise ValueError(f"pump state must be 0 or 1, got {pump!r}")
    return pump * params.pump_max_flow


def outflow(valve: int, level: float, params: PlantParams) -> float:
    if valve not in (0, 1):
        raise ValueError(f"valve state must be 0 or 1, got {valve!r}")
    if level < 0:
        raise ValueError(f"negative level {level!r} (corrupted state)")
    return valve * params.outlet_section * math.sqrt(2.0 * params.gravity * level)


def initial_state(params: PlantParams, level: float = 0.5, pump: int = 1, valve: int = 0) -> PlantState:
    """State at t=0 with flows consistent with the actuators."""
    return PlantState(level, inflow(pump, params), outflow(valve, level, params), pump, valve, 0.0)


def actuate(state: PlantState, pump: int, valve: int, params: PlantParams) -> PlantState:
    """Apply new actuator states; flows are recomputed at the current level."""
    if (pump, valve) == (state.pump, state.valve):
        return state
    return replace(
        state,
        pump=pump,
        valve=valve,
        inflow=inflow(pump, params),
        outflow=outflow(valve, state.level, params),
    )


def step(state: PlantState, params: PlantParams) -> PlantState:
    """Advance one explicit Euler step of dh/dt = (Q_in - Q_out) / A."""
    q_in = inflow(state.pump, params)
    q_out = outflow(state.valve, state.level, params)
    level = state.level + (q_in - q_out) * params.dt / params.tank_section
    return PlantState(
        level=max(0.0, level),
        inflow=q_in,
        outflow=q_out,
        pump=state.pump,
        valve=state.valve,
        time=state.time + params.dt,
    )


def control(measured_level: float, thresholds: Thresholds, current: tuple[int, int]) -> tuple[int, int]:
    """On/off law: fill below L, drain above H, hold inside the dead band."""
    if measured_level < thresholds.L:
        return (1, 0)
    if measured_level > thresholds.H:
        return (0, 1)
    return current


def safety_check(level: float, thresholds: Thresholds) -> SafetyStatus:
    if level < thresholds.LL:
        return SafetyStatus.UNDERFLOW_ALARM
    if level > thresholds.HH:
        return SafetyStatus.OVERFLOW_ALARM
    return SafetyStatus.OK


def simulate(
    params: PlantParams,
    thresholds: Thresholds,
    steps: int,
    state: PlantState | None = None,
) -> Iterator[PlantState]:
    """Closed loop with the controller reading the true level.

    Yields the state after each plant step, before the controller reacts.
    """
    if state is None:
        state = initial_state(params)
    for _ in range(steps):
        state = step(state, params)
        yield state
        pump, valve = control(state.level, thresholds, (state.pump, state.valve))
        state = actuate(state, pump, valve, params)
