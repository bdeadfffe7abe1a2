"""Stein's unbiased risk estimate for the vector NLM filter.

For Gaussian noise with per-pixel covariance Psi, the mean squared error of
the filter output against the unseen clean cube is estimated without bias by

    R = (1/HL) sum_s ||f(s) - I_in(s)||^2 - trace(Psi) + (2/HL) sum_s trace(Psi J(s)),

where J(s) is the Jacobian of f(s) with respect to I_in(s). Candidate sets
are held fixed while differentiating.
"""

from __future__ import annotations

from collections.abc import Sequence
from functools import lru_cache
import logging
import math

import numpy as np
from pydantic import BaseModel
from scipy import linalg

from ovnlm.cube_io import PixelCoord, SpectralCube
from ovnlm.noise_model import CovarianceError, NoiseCovariance
from ovnlm.patches import kernel_weights, pair_slots
from ovnlm.similarity import CandidateSets
from ovnlm.vnlm import (
    FilterEngine,
    FilterParams,
    candidate_indices,
    resolve_coord,
    metric_factor,
    patch_distance,
)
from ovnlm.workers import map_blocks

logger = logging.getLogger(__name__)


class RiskReport(BaseModel):
    data_term: float
    trace_term: float
    divergence_term: float
    risk: float

    @classmethod
    def from_terms(cls, data_term: float, trace_term: float, divergence_term: float) -> "RiskReport":
        return cls(
            data_term=data_term,
            trace_term=trace_term,
            divergence_term=divergence_term,
            risk=data_term - trace_term + divergence_term,
        )


def chi(cube: SpectralCube, s: PixelCoord, p: PixelCoord, params: FilterParams) -> float:
    """Unnormalized weight exp(-d(s, p) / h^2), in (0, 1]."""
    return math.exp(-patch_distance(cube, s, p, params) / (params.h * params.h))


def chi_gradient(cube: SpectralCube, s: PixelCoord, p: PixelCoord, params: FilterParams) -> np.ndarray:
    """d chi(p) / d I_in(s) as a P-vector.

    Slot k contributes w(k) * 2 Phi^-1 (I(s-k) - I(p-k)) with sign + when it
    reads s on the s side (k = 0) and - when it reads s on the p side
    (k = p - s, i.e. the reflected pixel 2s - p is paired with s). Mirror
    extension can add further slots at the borders; all are summed.
    """
    s = resolve_coord(cube, s)
    p = resolve_coord(cube, p)
    flat = s.flat(cube.width)
    slots_s, slots_p = pair_slots(cube.height, cube.width, params.patch_radius, s, p)
    signs = (slots_s == flat).astype(np.float64) - (slots_p == flat).astype(np.float64)
    if not np.any(signs):
        return np.zeros(cube.bands)
    values = cube.pixels
    deltas = values[slots_s] - values[slots_p]
    weights = kernel_weights(params.patch_radius, params.kernel, params.kernel_std)
    pulled = (weights * signs) @ deltas
    solved = linalg.cho_solve((metric_factor(params.phi), True), pulled)
    weight = chi(cube, s, p, params)
    return -2.0 * weight / (params.h * params.h) * solved


@lru_cache(maxsize=1)
def note_jacobian_form() -> None:
    """Log once per process which weighted-sum form the Jacobian uses."""
    logger.warning(
        "Jacobian weighs candidate intensities I_in(p) inside the quotient-rule sums; "
        "the variant with I_in(s) in those sums is treated as a suspected typo and not used"
    )


def _trace_product(cov: np.ndarray, jac: np.ndarray) -> float:
    return float(np.einsum("ij,ji->", cov, jac))


def divergence_at(
    cube: SpectralCube,
    s: PixelCoord,
    params: FilterParams,
    candidates: Sequence[PixelCoord] | np.ndarray,
    cov: NoiseCovariance,
) -> float:
    """trace(Psi^T J(s)) for the filter restricted to the given candidate list."""
    s = resolve_coord(cube, s)
    if cov.bands != cube.bands:
        raise CovarianceError(f"Covariance has {cov.bands} bands, cube has {cube.bands}")
    indices = np.unique(candidate_indices(cube, candidates))
    flat = s.flat(cube.width)
    if not np.any(indices == flat):
        raise ValueError("Candidate list must contain s")
    note_jacobian_form()
    _, jac = FilterEngine(cube, params).jacobian(flat, indices)
    return _trace_product(cov.matrix, jac)


def evaluate_risk(
    noisy: SpectralCube,
    params: FilterParams,
    candidates: CandidateSets,
    cov: NoiseCovariance,
    workers: int | None = None,
) -> tuple[RiskReport, SpectralCube]:
    """Filter the cube and score it; returns the report and the filtered cube."""
    if cov.bands != noisy.bands:
        raise CovarianceError(f"Covariance has {cov.bands} bands, cube has {noisy.bands}")
    n_pixels = noisy.n_pixels
    if candidates.n_pixels != n_pixels:
        raise ValueError(f"Candidate sets cover {candidates.n_pixels} pixels, cube has {n_pixels}")

    note_jacobian_form()
    engine = FilterEngine(noisy, params)
    psi = cov.matrix
    restored = np.empty_like(engine.values)
    residuals = np.empty(n_pixels)
    divergences = np.empty(n_pixels)

    def run(start: int, stop: int) -> None:
        for flat in range(start, stop):
            estimate, jac = engine.jacobian(flat, candidates.for_pixel(flat))
            restored[flat] = estimate
            residuals[flat] = float(np.sum((estimate - engine.values[flat]) ** 2))
            divergences[flat] = _trace_product(psi, jac)

    map_blocks(run, n_pixels, workers)
    report = RiskReport.from_terms(
        data_term=float(np.sum(residuals)) / n_pixels,
        trace_term=cov.trace,
        divergence_term=2.0 * float(np.sum(divergences)) / n_pixels,
    )
    logger.debug("SURE h=%.6g risk=%.6g", params.h, report.risk)
    return report, SpectralCube.from_pixels(restored, noisy.height, noisy.width)


def sure_risk(
    noisy: SpectralCube,
    params: FilterParams,
    candidates: CandidateSets,
    cov: NoiseCovariance,
    workers: int | None = None,
) -> RiskReport:
    report, _ = evaluate_risk(noisy, params, candidates, cov, workers)
    return report
