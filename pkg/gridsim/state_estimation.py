"""Weighted least squares state estimation and residual-based bad data detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import chi2

from gridsim.errors import LayoutError
from gridsim.grid_model import GridCase
from gridsim.power_flow import MeasurementVector, StateVector, measurement_function, measurement_jacobian

logger = logging.getLogger(__name__)

Covariance = Union[None, float, np.ndarray]


class Verdict(str, Enum):
    NORMAL = "normal"
    ATTACK = "attack"


class Calibration(str, Enum):
    FIXED = "fixed"
    QUANTILE_OF_NORMAL = "quantile_of_normal"
    CHI2 = "chi2"


@dataclass(frozen=True, eq=False)
class EstimationResult:
    x_hat: Union[StateVector, np.ndarray]
    residual_norm: float
    iterations: int
    converged: bool
    residual: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if not self.residual_norm >= 0:
            raise ValueError(f"residual norm must be non-negative, got {self.residual_norm}")


@dataclass(frozen=True)
class BddConfig:
    tau: float
    calibration: Calibration = Calibration.FIXED

    def __post_init__(self) -> None:
        object.__setattr__(self, "calibration", Calibration(self.calibration))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def from_normal_residuals(cls, residuals: Sequence[float], quantile: float = 0.999) -> "BddConfig":
        return cls(tau=calibrate_tau(residuals, quantile), calibration=Calibration.QUANTILE_OF_NORMAL)

    @classmethod
    def from_chi2(cls, sigma: float, degrees_of_freedom: int, false_alarm_rate: float = 0.001) -> "BddConfig":
        return cls(tau=chi2_tau(sigma, degrees_of_freedom, false_alarm_rate), calibration=Calibration.CHI2)


def _weight_matrix(covariance: Covariance, m: int) -> np.ndarray:
    if covariance is None:
        return np.eye(m)
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim == 0:
        return np.eye(m) / float(cov)
    if cov.ndim == 1:
        if cov.shape != (m,):
            raise LayoutError(f"covariance diagonal has {cov.shape[0]} entries, expected {m}")
        return np.diag(1.0 / cov)
    if cov.shape != (m, m):
        raise LayoutError(f"covariance has shape {cov.shape}, expected {(m, m)}")
    return np.linalg.inv(cov)


def wls_estimate_dc(H: np.ndarray, R: Covariance, z: np.ndarray) -> EstimationResult:
    """Linear WLS x = (H^T W H)^+ H^T W z with W = R^-1.

    The pseudo-inverse returns the minimum-norm solution when H has the
    all-ones nullspace of an unreferenced DC model.
    """

    H = np.asarray(H, dtype=float)
    z = np.asarray(z, dtype=float)
    if H.ndim != 2 or z.shape != (H.shape[0],):
        raise LayoutError(f"H has shape {H.shape} but z has shape {z.shape}")
    W = _weight_matrix(R, H.shape[0])
    gain = H.T @ W @ H
    x_hat = np.linalg.pinv(gain) @ (H.T @ W @ z)
    residual = z - H @ x_hat
    return EstimationResult(
        x_hat=x_hat,
        residual_norm=float(np.linalg.norm(residual)),
        iterations=1,
        converged=True,
        residual=residual,
    )


def wls_estimate_ac(
    case: GridCase,
    z: MeasurementVector,
    R: Covariance = None,
    init: Optional[StateVector] = None,
    max_iter: int = 50,
    tol: float = 1e-10,
) -> EstimationResult:
    """Gauss-Newton AC state estimation with step halving.

    Minimizes (z - h(x))^T R^-1 (z - h(x)) over all magnitudes and the
    non-slack angles. Returns ``converged=False`` with the last iterate when
    the iteration budget runs out.
    """

    if z.layout.fingerprint != case.fingerprint or len(z) != 2 * case.n_bus + 2 * case.n_branch:
        raise LayoutError(f"measurement layout does not belong to case {case.id}")

    values = z.values
    W = _weight_matrix(R, len(values))
    start = init or StateVector.flat(case)
    v = start.v.copy()
    theta = start.theta.copy()
    ref = case.slack_position
    angles = np.array([i for i in range(case.n_bus) if i != ref], dtype=np.int64)

    def objective(v_: np.ndarray, theta_: np.ndarray) -> float:
        r_ = values - measurement_function(case, v_, theta_)
        return float(r_ @ W @ r_)

    current = objective(v, theta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        residual = values - measurement_function(case, v, theta)
        d_theta, d_v = measurement_jacobian(case, v, theta)
        jac = np.hstack([d_theta[:, angles], d_v])
        gain = jac.T @ W @ jac
        rhs = jac.T @ W @ residual
        try:
            step = np.linalg.solve(gain, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(gain, rhs, rcond=None)[0]

        alpha = 1.0
        while True:
            theta_new = theta.copy()
            theta_new[angles] += alpha * step[: len(angles)]
            v_new = v + alpha * step[len(angles) :]
            if np.all(v_new > 0):
                candidate = objective(v_new, theta_new)
                if candidate <= current or alpha < 1e-6:
                    break
            alpha *= 0.5

        theta, v, current = theta_new, v_new, candidate
        if np.max(np.abs(alpha * step)) < tol:
            converged = True
            break

    residual = values - measurement_function(case, v, theta)
    if not converged:
        logger.debug("AC WLS on %s stopped after %d iterations without converging", case.id, iterations)
    return EstimationResult(
        x_hat=StateVector(v=v, theta=theta - theta[ref], reference=ref),
        residual_norm=float(np.linalg.norm(residual)),
        iterations=iterations,
        converged=converged,
        residual=residual,
    )


def bdd_detect(residual_norm: float, config: BddConfig) -> Verdict:
    """Normal iff the residual norm does not exceed tau."""

    return Verdict.NORMAL if residual_norm <= config.tau else Verdict.ATTACK


def calibrate_tau(normal_residuals: Sequence[float], quantile: float = 0.999) -> float:
    """Empirical quantile of normal residual norms, taken as an order statistic."""

    sample = np.asarray(normal_residuals, dtype=float)
    if sample.size == 0:
        raise ValueError("cannot calibrate tau on an empty residual sample")
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    return float(np.quantile(sample, quantile, method="higher"))


def chi2_tau(sigma: float, degrees_of_freedom: int, false_alarm_rate: float = 0.001) -> float:
    """Residual-norm threshold for i.i.d. N(0, sigma^2) errors at a false alarm rate."""

    if degrees_of_freedom < 1:
        raise ValueError("degrees of freedom must be at least 1")
    return float(sigma * np.sqrt(chi2.ppf(1.0 - false_alarm_rate, df=degrees_of_freedom)))
