"""Stealthy false data injection: a = h(x + c) - h(x).

An attacker who knows the line parameters shifts the state by c and injects
the matching measurement change, so the estimator lands on x + c with an
unchanged residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from gridsim.errors import CaseError, LayoutError
from gridsim.grid_model import GridCase
from gridsim.power_flow import MeasurementLayout, MeasurementVector, StateVector, measurement_function, measurement_layout


class AttackMode(str, Enum):
    ANGLE = "angle"
    MAGNITUDE_AND_ANGLE = "magnitude_and_angle"


@dataclass(frozen=True)
class AttackSpec:
    target_buses: Tuple[int, ...]
    intensity: float
    seed: int = 0
    mode: AttackMode = AttackMode.ANGLE

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_buses", tuple(sorted(set(int(b) for b in self.target_buses))))
        object.__setattr__(self, "mode", AttackMode(self.mode))
        if not self.target_buses:
            raise ValueError("an attack needs at least one target bus")
        if not self.intensity > 0:
            raise ValueError(f"attack intensity must be positive, got {self.intensity}")

    @classmethod
    def sample(
        cls,
        buses: Sequence[int],
        intensities: Sequence[float],
        seed: int,
        mode: AttackMode = AttackMode.ANGLE,
    ) -> "AttackSpec":
        """One target bus and one intensity drawn from ``seed``; the seed is kept with the spec."""

        rng = np.random.default_rng(seed)
        bus = buses[int(rng.integers(len(buses)))]
        intensity = intensities[int(rng.integers(len(intensities)))]
        return cls((bus,), intensity, seed=seed, mode=mode)


@dataclass(frozen=True, eq=False)
class AttackVector:
    """``a`` in measurement layout; ``c`` stacks the angle then magnitude shifts."""

    a: np.ndarray
    c: np.ndarray
    layout: MeasurementLayout

    def __post_init__(self) -> None:
        if self.a.shape != (self.layout.size,):
            raise LayoutError(f"attack vector has shape {self.a.shape}, layout expects {self.layout.size}")
        if self.c.shape != (2 * self.layout.n_bus,):
            raise LayoutError(f"state shift has shape {self.c.shape}, expected {2 * self.layout.n_bus}")

    @property
    def c_theta(self) -> np.ndarray:
        return self.c[: self.layout.n_bus]

    @property
    def c_v(self) -> np.ndarray:
        return self.c[self.layout.n_bus :]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.a))


def state_shift(case: GridCase, state: StateVector, spec: AttackSpec) -> np.ndarray:
    """c for the target buses: theta_i * gamma, and v_i * gamma in magnitude mode."""

    c = np.zeros(2 * case.n_bus)
    for bus_id in spec.target_buses:
        pos = case.position(bus_id)
        if pos == case.slack_position:
            raise CaseError(f"case {case.id}: bus {bus_id} is the slack bus, its angle is pinned")
        c[pos] = spec.intensity * state.theta[pos]
        if spec.mode is AttackMode.MAGNITUDE_AND_ANGLE:
            c[case.n_bus + pos] = spec.intensity * state.v[pos]
    return c


def construct_attack(
    case: GridCase,
    state: StateVector,
    spec: AttackSpec,
    c: Optional[np.ndarray] = None,
) -> AttackVector:
    """Build the stealthy injection for ``spec`` on the solved ``state``.

    ``c`` overrides the state shift derived from the spec (angles first, then
    magnitudes); the target buses are still validated.
    """

    if len(state.v) != case.n_bus:
        raise LayoutError(f"state has {len(state.v)} buses, case {case.id} has {case.n_bus}")
    derived = state_shift(case, state, spec)
    if c is None:
        c = derived
    else:
        c = np.asarray(c, dtype=float)
        if c.shape != (2 * case.n_bus,):
            raise LayoutError(f"state shift must have {2 * case.n_bus} entries, got shape {c.shape}")

    n = case.n_bus
    baseline = measurement_function(case, state.v, state.theta)
    shifted = measurement_function(case, state.v + c[n:], state.theta + c[:n])
    return AttackVector(a=shifted - baseline, c=c, layout=measurement_layout(case))


def apply_attack(z: MeasurementVector, attack: AttackVector) -> MeasurementVector:
    if z.layout != attack.layout:
        raise LayoutError("attack vector and measurements come from different layouts")
    return MeasurementVector.from_values(z.values + attack.a, z.layout)
