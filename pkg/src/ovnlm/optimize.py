"""Choose (h, Phi) by minimizing the SURE risk.

Constraints h > 0 and Phi >= 0 are removed by reparameterization: the
optimizer works on theta = (log h, entries of L) with Phi = L L^T, so every
iterate is feasible. Descent uses quasi-Newton directions built from central
finite-difference gradients and an Armijo backtracking line search, so the
recorded risk never increases.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
from typing import Protocol

import numpy as np
from pydantic import BaseModel

from ovnlm.config import get_settings
from ovnlm.cube_io import SpectralCube
from ovnlm.noise_model import NoiseCovariance
from ovnlm.similarity import CandidateSets
from ovnlm.sure import sure_risk
from ovnlm.vnlm import METRIC_SHAPES, FilterParams, metric_factor

logger = logging.getLogger(__name__)

STOP_REASONS = ("iter-max", "risk-plateau", "line-search-failure")
# Above this many bands the automatic metric shape switches from full to diagonal.
FULL_METRIC_MAX_BANDS = 8

Objective = Callable[[np.ndarray], float]


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    iter_max: int = field(default_factory=lambda: get_settings().iter_max)
    # None means 1e-4 * |initial risk|.
    xi: float | None = None
    # None keeps the shape carried by the initial parameters.
    metric_shape: str | None = None
    finite_difference_step: float = 1e-4
    line_search_shrink: float = 0.5
    max_backtracks: int = 20
    armijo: float = 1e-4
    workers: int | None = None
    gradient_workers: int = 1

    def __post_init__(self) -> None:
        if self.iter_max < 1:
            raise ValueError(f"iter_max must be >= 1, got {self.iter_max}")
        if self.xi is not None and not self.xi >= 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if self.metric_shape is not None and self.metric_shape not in METRIC_SHAPES:
            raise ValueError(f"Unsupported metric shape: {self.metric_shape}")
        if not self.finite_difference_step > 0:
            raise ValueError(f"finite_difference_step must be > 0, got {self.finite_difference_step}")
        if not 0 < self.line_search_shrink < 1:
            raise ValueError(f"line_search_shrink must be in (0, 1), got {self.line_search_shrink}")
        if self.max_backtracks < 1:
            raise ValueError(f"max_backtracks must be >= 1, got {self.max_backtracks}")
        if self.gradient_workers < 1:
            raise ValueError(f"gradient_workers must be >= 1, got {self.gradient_workers}")


class TraceEntry(BaseModel):
    iteration: int
    h: float
    phi: list[float]
    risk: float


@dataclass
class OptimizationTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    stop_reason: str = "iter-max"

    def record(self, iteration: int, params: FilterParams, risk: float) -> None:
        self.entries.append(
            TraceEntry(
                iteration=iteration,
                h=params.h,
                phi=[float(v) for v in params.phi.ravel()],
                risk=risk,
            )
        )

    @property
    def risks(self) -> list[float]:
        return [entry.risk for entry in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def auto_metric_shape(bands: int) -> str:
    return "full" if bands <= FULL_METRIC_MAX_BANDS else "diagonal"


def default_init(
    cov: NoiseCovariance,
    patch_radius: int | None = None,
    metric_shape: str | None = None,
) -> FilterParams:
    """Heuristic starting point: h0 = sqrt(trace(Psi) / P) * |K|, Phi0 = diag(Psi) scaled to trace P.

    The identity shape always starts from Phi0 = Id.
    """
    radius = get_settings().patch_radius if patch_radius is None else patch_radius
    bands = cov.bands
    shape = metric_shape or auto_metric_shape(bands)
    patch_size = (2 * radius + 1) ** 2
    trace = cov.trace
    if trace <= 0:
        logger.warning("Noise covariance has zero trace; starting from h=1 and Phi=Id")
        return FilterParams(h=1.0, phi=np.eye(bands), patch_radius=radius, metric_shape=shape)
    h0 = math.sqrt(trace / bands) * patch_size
    phi0 = np.eye(bands) if shape == "identity" else np.diag(cov.diagonal * bands / trace)
    return FilterParams(h=h0, phi=phi0, patch_radius=radius, metric_shape=shape)


class ParamVector:
    """Maps FilterParams to an unconstrained vector and back, for one metric shape."""

    def __init__(self, template: FilterParams) -> None:
        self.template = template
        self.shape = template.metric_shape
        self.bands = template.bands
        self._tril = np.tril_indices(self.bands)

    @property
    def size(self) -> int:
        if self.shape == "identity":
            return 1
        if self.shape == "diagonal":
            return 1 + self.bands
        return 1 + len(self._tril[0])

    def encode(self, params: FilterParams) -> np.ndarray:
        head = [math.log(params.h)]
        if self.shape == "identity":
            return np.array(head)
        if self.shape == "diagonal":
            return np.concatenate([head, np.sqrt(np.diag(params.phi))])
        return np.concatenate([head, metric_factor(params.phi)[self._tril]])

    def decode(self, theta: np.ndarray) -> FilterParams:
        h = math.exp(float(theta[0]))
        if self.shape == "identity":
            return self.template.with_h(h)
        if self.shape == "diagonal":
            phi = np.diag(np.asarray(theta[1:]) ** 2)
        else:
            lower = np.zeros((self.bands, self.bands))
            lower[self._tril] = theta[1:]
            phi = lower @ lower.T
            phi = 0.5 * (phi + phi.T)
        return FilterParams(
            h=h,
            phi=phi,
            patch_radius=self.template.patch_radius,
            metric_shape=self.shape,
            kernel=self.template.kernel,
            kernel_std=self.template.kernel_std,
        )


def central_gradient(
    objective: Objective,
    theta: np.ndarray,
    relative_step: float,
    workers: int = 1,
) -> np.ndarray:
    """Central differences with step relative_step * max(1, |theta_i|)."""
    steps = relative_step * np.maximum(1.0, np.abs(theta))

    def component(i: int) -> float:
        forward = theta.copy()
        backward = theta.copy()
        forward[i] += steps[i]
        backward[i] -= steps[i]
        return (objective(forward) - objective(backward)) / (2.0 * steps[i])

    if workers > 1 and theta.size > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(component, range(theta.size))))
    return np.array([component(i) for i in range(theta.size)])


class Stepper(Protocol):
    def step(
        self,
        objective: Objective,
        theta: np.ndarray,
        value: float,
        gradient: np.ndarray,
    ) -> tuple[np.ndarray, float] | None:
        """Return an accepted (theta, value) with value < the current one, or None."""
        ...

    def update(self, step: np.ndarray, gradient_change: np.ndarray) -> None:
        ...


class QuasiNewtonStepper:
    """BFGS inverse-Hessian directions with Armijo backtracking."""

    def __init__(self, size: int, shrink: float = 0.5, max_backtracks: int = 20, armijo: float = 1e-4) -> None:
        self.shrink = shrink
        self.max_backtracks = max_backtracks
        self.armijo = armijo
        self.inverse_hessian: np.ndarray | None = None
        self.size = size
        self.updates = 0

    def _direction(self, gradient: np.ndarray) -> np.ndarray:
        if self.inverse_hessian is None:
            # Unit-length first step.
            self.inverse_hessian = np.eye(self.size) / max(float(np.linalg.norm(gradient)), 1e-300)
        direction = -self.inverse_hessian @ gradient
        if float(gradient @ direction) >= 0:
            logger.debug("Quasi-Newton direction is not a descent direction; resetting")
            self.inverse_hessian = np.eye(self.size) / max(float(np.linalg.norm(gradient)), 1e-300)
            self.updates = 0
            direction = -self.inverse_hessian @ gradient
        return direction

    def step(
        self,
        objective: Objective,
        theta: np.ndarray,
        value: float,
        gradient: np.ndarray,
    ) -> tuple[np.ndarray, float] | None:
        direction = self._direction(gradient)
        slope = float(gradient @ direction)
        t = 1.0
        for _ in range(self.max_backtracks):
            candidate = theta + t * direction
            candidate_value = objective(candidate)
            if math.isfinite(candidate_value) and candidate_value <= value + self.armijo * t * slope:
                if candidate_value < value:
                    return candidate, candidate_value
            t *= self.shrink
        return None

    def update(self, step: np.ndarray, gradient_change: np.ndarray) -> None:
        curvature = float(gradient_change @ step)
        if curvature <= 0 or self.inverse_hessian is None:
            return
        if self.updates == 0:
            self.inverse_hessian = np.eye(self.size) * curvature / float(gradient_change @ gradient_change)
        rho = 1.0 / curvature
        identity = np.eye(self.size)
        left = identity - rho * np.outer(step, gradient_change)
        self.inverse_hessian = left @ self.inverse_hessian @ left.T + rho * np.outer(step, step)
        self.updates += 1


def optimize_params(
    noisy: SpectralCube,
    cov: NoiseCovariance,
    init: FilterParams,
    cfg: OptimizerConfig | None = None,
    candidates: CandidateSets | None = None,
    stepper: Stepper | None = None,
) -> tuple[FilterParams, OptimizationTrace]:
    """Minimize the SURE risk over (h, Phi) with candidate sets held fixed."""
    cfg = cfg or OptimizerConfig()
    candidates = candidates if candidates is not None else CandidateSets.full(noisy.n_pixels)
    if cfg.metric_shape is not None and cfg.metric_shape != init.metric_shape:
        phi = init.phi
        if cfg.metric_shape == "identity":
            phi = np.eye(init.bands) * float(np.trace(phi)) / init.bands
        init = FilterParams(
            h=init.h,
            phi=phi,
            patch_radius=init.patch_radius,
            metric_shape=cfg.metric_shape,
            kernel=init.kernel,
            kernel_std=init.kernel_std,
        )
    vector = ParamVector(init)

    def objective(theta: np.ndarray) -> float:
        try:
            params = vector.decode(theta)
        except (ValueError, OverflowError):
            return math.inf
        value = sure_risk(noisy, params, candidates, cov, cfg.workers).risk
        return value if math.isfinite(value) else math.inf

    theta = vector.encode(init)
    risk = sure_risk(noisy, init, candidates, cov, cfg.workers).risk
    if not math.isfinite(risk):
        raise OptimizationError(f"SURE risk at the initial parameters is not finite ({risk}); check Psi and the cube")
    xi = cfg.xi if cfg.xi is not None else 1e-4 * abs(risk)

    trace = OptimizationTrace()
    trace.record(0, init, risk)
    best = init
    stepper = stepper or QuasiNewtonStepper(vector.size, cfg.line_search_shrink, cfg.max_backtracks, cfg.armijo)
    gradient = central_gradient(objective, theta, cfg.finite_difference_step, cfg.gradient_workers)

    for iteration in range(1, cfg.iter_max + 1):
        if not np.all(np.isfinite(gradient)) or not np.any(gradient):
            trace.stop_reason = "risk-plateau"
            break
        accepted = stepper.step(objective, theta, risk, gradient)
        if accepted is None:
            logger.warning("Line search found no decrease after %d backtracks; keeping best parameters", cfg.max_backtracks)
            trace.stop_reason = "line-search-failure"
            break
        new_theta, new_risk = accepted
        new_gradient = central_gradient(objective, new_theta, cfg.finite_difference_step, cfg.gradient_workers)
        stepper.update(new_theta - theta, new_gradient - gradient)
        decrease = risk - new_risk
        theta, risk, gradient = new_theta, new_risk, new_gradient
        best = vector.decode(theta)
        trace.record(iteration, best, risk)
        logger.info("iter %d: h=%.6g risk=%.6g", iteration, best.h, risk)
        if decrease <= xi:
            trace.stop_reason = "risk-plateau"
            break

    return best, trace
