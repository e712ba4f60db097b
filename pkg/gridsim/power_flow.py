"""AC power flow, the measurement function h(x), and the DC flow model.

Measurements are laid out as ``[P (n_bus), Q (n_bus), p (n_branch), q (n_branch)]``
with flows metered at the from-end of every branch. For a branch i->j with
series admittance g + jb the from-end flows are

    p_ij = V_i^2 g - V_i V_j (g cos(t_i - t_j) + b sin(t_i - t_j))
    q_ij = -V_i^2 (b + b_sh / 2) - V_i V_j (g sin(t_i - t_j) - b cos(t_i - t_j))

and bus injections are the sums of the flows leaving the bus. Everything is
evaluated through the complex admittance matrices, which is the same model
written in rectangular form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from gridsim.errors import LayoutError, PowerFlowError
from gridsim.grid_model import GridCase

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 50
INTERIOR_TOLERANCE = 1e-10
ACCEPT_TOLERANCE = 1e-8


class NoiseDistribution(str, Enum):
    UNIFORM_BOUNDED = "uniform_bounded"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True, eq=False)
class StateVector:
    """Bus voltage magnitudes and angles (radians).

    ``reference`` is the 0-based position of the slack bus, whose angle is 0.
    """

    v: np.ndarray
    theta: np.ndarray
    reference: int

    def __post_init__(self) -> None:
        v = np.asarray(self.v, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if v.shape != theta.shape or v.ndim != 1:
            raise ValueError(f"v and theta must be 1-D of equal length, got {v.shape} and {theta.shape}")
        if not np.all(v > 0):
            raise ValueError("voltage magnitudes must be positive")
        if abs(theta[self.reference]) > 1e-12:
            raise ValueError(f"reference angle must be 0, got {theta[self.reference]}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def flat(cls, case: GridCase) -> "StateVector":
        return cls(v=np.ones(case.n_bus), theta=np.zeros(case.n_bus), reference=case.slack_position)

    @property
    def complex_voltage(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)

    def theta_degrees(self) -> np.ndarray:
        return np.degrees(self.theta)


@dataclass(frozen=True)
class MeasurementLayout:
    bus_ids: Tuple[int, ...]
    branch_ends: Tuple[Tuple[int, int], ...]
    fingerprint: str

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.branch_ends)

    @property
    def size(self) -> int:
        return 2 * self.n_bus + 2 * self.n_branch

    def labels(self) -> Tuple[str, ...]:
        buses = [f"P_{i}" for i in self.bus_ids] + [f"Q_{i}" for i in self.bus_ids]
        flows = [f"p_{f}_{t}" for f, t in self.branch_ends] + [f"q_{f}_{t}" for f, t in self.branch_ends]
        return tuple(buses + flows)


def measurement_layout(case: GridCase) -> MeasurementLayout:
    return MeasurementLayout(
        bus_ids=case.external_ids,
        branch_ends=tuple((b.from_bus, b.to_bus) for b in case.branches),
        fingerprint=case.fingerprint,
    )


@dataclass(frozen=True, eq=False)
class MeasurementVector:
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    layout: MeasurementLayout

    def __post_init__(self) -> None:
        if len(self.p_inj) != self.layout.n_bus or len(self.q_inj) != self.layout.n_bus:
            raise LayoutError("injection vectors do not match the bus count of the layout")
        if len(self.p_flow) != self.layout.n_branch or len(self.q_flow) != self.layout.n_branch:
            raise LayoutError("flow vectors do not match the branch count of the layout")

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.p_inj, self.q_inj, self.p_flow, self.q_flow])

    @classmethod
    def from_values(cls, values: np.ndarray, layout: MeasurementLayout) -> "MeasurementVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (layout.size,):
            raise LayoutError(f"expected {layout.size} measurements, got shape {values.shape}")
        n, nb = layout.n_bus, layout.n_branch
        return cls(
            p_inj=values[:n].copy(),
            q_inj=values[n : 2 * n].copy(),
            p_flow=values[2 * n : 2 * n + nb].copy(),
            q_flow=values[2 * n + nb :].copy(),
            layout=layout,
        )

    def __len__(self) -> int:
        return self.layout.size


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0
    distribution: NoiseDistribution = NoiseDistribution.UNIFORM_BOUNDED

    def __post_init__(self) -> None:
        object.__setattr__(self, "distribution", NoiseDistribution(self.distribution))
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


class PowerFlowResult(NamedTuple):
    state: StateVector
    iterations: int
    mismatch: float


class AdmittanceMatrices(NamedTuple):
    ybus: np.ndarray
    yf: np.ndarray
    yt: np.ndarray


@lru_cache(maxsize=64)
def admittance_matrices(case: GridCase) -> AdmittanceMatrices:
    """Dense bus and from/to-end branch admittance matrices (pi model plus bus shunts)."""

    n, nb = case.n_bus, case.n_branch
    f, t = case.from_idx, case.to_idx
    ys = 1.0 / (case.r + 1j * case.x)
    y_self = ys + 0.5j * case.b_shunt
    rows = np.arange(nb)

    yf = np.zeros((nb, n), dtype=complex)
    yt = np.zeros((nb, n), dtype=complex)
    yf[rows, f] = y_self
    yf[rows, t] = -ys
    yt[rows, t] = y_self
    yt[rows, f] = -ys

    ybus = np.zeros((n, n), dtype=complex)
    np.add.at(ybus, (f, f), y_self)
    np.add.at(ybus, (t, t), y_self)
    np.add.at(ybus, (f, t), -ys)
    np.add.at(ybus, (t, f), -ys)
    ybus[np.diag_indices(n)] += 1j * case.bus_shunt
    return AdmittanceMatrices(ybus, yf, yt)


def measurement_function(case: GridCase, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Noiseless h(x) in the canonical measurement layout."""

    adm = admittance_matrices(case)
    voltage = v * np.exp(1j * theta)
    s_bus = voltage * np.conj(adm.ybus @ voltage)
    s_from = voltage[case.from_idx] * np.conj(adm.yf @ voltage)
    return np.concatenate([s_bus.real, s_bus.imag, s_from.real, s_from.imag])


def to_end_flows(case: GridCase, state: StateVector) -> Tuple[np.ndarray, np.ndarray]:
    adm = admittance_matrices(case)
    voltage = state.complex_voltage
    s_to = voltage[case.to_idx] * np.conj(adm.yt @ voltage)
    return s_to.real, s_to.imag


def dsbus_dv(ybus: np.ndarray, voltage: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of bus injections w.r.t. magnitude and angle."""

    current = ybus @ voltage
    vnorm = voltage / np.abs(voltage)
    ds_dvm = voltage[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(current) * vnorm)
    ds_dva = 1j * voltage[:, None] * np.conj(np.diag(current) - ybus * voltage[None, :])
    return ds_dvm, ds_dva


def dsf_dv(yf: np.ndarray, voltage: np.ndarray, from_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of from-end branch flows w.r.t. magnitude and angle."""

    rows = np.arange(len(from_idx))
    current = yf @ voltage
    v_from = voltage[from_idx]
    vnorm = voltage / np.abs(voltage)

    cf_v = np.zeros(yf.shape, dtype=complex)
    cf_v[rows, from_idx] = voltage[from_idx]
    cf_vnorm = np.zeros(yf.shape, dtype=complex)
    cf_vnorm[rows, from_idx] = vnorm[from_idx]

    dsf_dva = 1j * (np.conj(current)[:, None] * cf_v - v_from[:, None] * np.conj(yf * voltage[None, :]))
    dsf_dvm = v_from[:, None] * np.conj(yf * vnorm[None, :]) + np.conj(current)[:, None] * cf_vnorm
    return dsf_dvm, dsf_dva


def measurement_jacobian(case: GridCase, v: np.ndarray, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (dh/dtheta, dh/dv), each of shape (m, n_bus)."""

    adm = admittance_matrices(case)
    voltage = v * np.exp(1j * theta)
    ds_dvm, ds_dva = dsbus_dv(adm.ybus, voltage)
    dsf_dvm, dsf_dva = dsf_dv(adm.yf, voltage, case.from_idx)
    d_theta = np.vstack([ds_dva.real, ds_dva.imag, dsf_dva.real, dsf_dva.imag])
    d_v = np.vstack([ds_dvm.real, ds_dvm.imag, dsf_dvm.real, dsf_dvm.imag])
    return d_theta, d_v


def _loads(case: GridCase, loads: Optional[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    if loads is None:
        return case.p_load, case.q_load
    p_load, q_load = (np.asarray(part, dtype=float) for part in loads)
    if p_load.shape != (case.n_bus,) or q_load.shape != (case.n_bus,):
        raise LayoutError(f"loads must have one entry per bus ({case.n_bus})")
    if not (np.all(np.isfinite(p_load)) and np.all(np.isfinite(q_load))):
        raise ValueError("loads must be finite")
    return p_load, q_load


def newton_raphson(
    case: GridCase,
    loads: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    max_iter: int = MAX_ITERATIONS,
    tol: float = INTERIOR_TOLERANCE,
    accept_tol: float = ACCEPT_TOLERANCE,
) -> PowerFlowResult:
    """Polar Newton-Raphson from a flat start; returns the state and iteration count."""

    p_load, q_load = _loads(case, loads)
    ybus = admittance_matrices(case).ybus
    s_spec = (case.p_gen - p_load) - 1j * q_load

    pv, pq = case.pv_idx, case.pq_idx
    pvpq = np.sort(np.concatenate([pv, pq]))
    n_angle = len(pvpq)

    vm = np.ones(case.n_bus)
    vm[pv] = case.v_setpoint[pv]
    vm[case.slack_position] = case.v_setpoint[case.slack_position]
    va = np.zeros(case.n_bus)
    voltage = vm * np.exp(1j * va)

    iterations = 0
    mismatch = np.inf
    while True:
        s_mis = voltage * np.conj(ybus @ voltage) - s_spec
        f_vec = np.concatenate([s_mis[pvpq].real, s_mis[pq].imag])
        mismatch = float(np.max(np.abs(f_vec))) if f_vec.size else 0.0
        if not np.isfinite(mismatch) or mismatch < tol or iterations >= max_iter:
            break

        ds_dvm, ds_dva = dsbus_dv(ybus, voltage)
        jac = np.block(
            [
                [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
                [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
            ]
        )
        try:
            dx = np.linalg.solve(jac, -f_vec)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(
                f"case {case.id}: singular Jacobian at iteration {iterations}", mismatch, iterations
            ) from exc
        va[pvpq] += dx[:n_angle]
        vm[pq] += dx[n_angle:]
        voltage = vm * np.exp(1j * va)
        iterations += 1

    if not np.isfinite(mismatch) or mismatch >= accept_tol:
        raise PowerFlowError(
            f"case {case.id}: power flow did not converge after {iterations} iterations "
            f"(mismatch {mismatch:.3e})",
            mismatch,
            iterations,
        )
    if np.any(vm <= 0):
        raise PowerFlowError(f"case {case.id}: non-physical voltage magnitude in solution", mismatch, iterations)

    logger.debug("Power flow on %s converged in %d iterations (mismatch %.2e)", case.id, iterations, mismatch)
    state = StateVector(v=vm, theta=va - va[case.slack_position], reference=case.slack_position)
    return PowerFlowResult(state, iterations, mismatch)


def solve_power_flow(case: GridCase, loads: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> StateVector:
    return newton_raphson(case, loads).state


def measure(case: GridCase, state: StateVector, noise: Optional[NoiseSpec] = None) -> MeasurementVector:
    """Evaluate z = h(x) + e for a state of ``case``.

    ``uniform_bounded`` noise draws each e_k from [-sigma |z_k|, sigma |z_k|];
    ``gaussian`` noise uses sigma |z_k| as the standard deviation.
    """

    if len(state.v) != case.n_bus:
        raise LayoutError(f"state has {len(state.v)} buses, case {case.id} has {case.n_bus}")
    z = measurement_function(case, state.v, state.theta)
    if noise is not None and noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        if noise.distribution is NoiseDistribution.UNIFORM_BOUNDED:
            unit = rng.uniform(-1.0, 1.0, size=z.shape)
        else:
            unit = rng.standard_normal(size=z.shape)
        z = z + noise.sigma * np.abs(z) * unit
    return MeasurementVector.from_values(z, measurement_layout(case))


def dc_measurement_matrix(case: GridCase, meter_set: Optional[Sequence[int]] = None) -> np.ndarray:
    """DC flow model rows P_ij = (theta_i - theta_j) / X_ij for the metered branches.

    ``meter_set`` lists 0-based branch positions; all branches by default.
    Resistances are ignored (DC approximation).
    """

    meters = np.arange(case.n_branch) if meter_set is None else np.asarray(list(meter_set), dtype=np.int64)
    matrix = np.zeros((len(meters), case.n_bus))
    rows = np.arange(len(meters))
    inv_x = 1.0 / case.x[meters]
    matrix[rows, case.from_idx[meters]] = inv_x
    matrix[rows, case.to_idx[meters]] = -inv_x
    return matrix
