"""PSNR and global-statistics SSIM between a reference cube and a test cube."""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel

from ovnlm.cube_io import DimensionMismatchError, SpectralCube


class QualityReport(BaseModel):
    psnr: float
    ssim_bands: list[float]
    ssim_mean: float
    max_signal: float


def _check_shapes(reference: SpectralCube, test: SpectralCube) -> None:
    if reference.shape != test.shape:
        raise DimensionMismatchError(f"Reference is {reference.shape}, test is {test.shape}")


def psnr(reference: SpectralCube, test: SpectralCube) -> float:
    """10 log10(max(reference)^2 / MSE); +inf when the cubes are identical."""
    _check_shapes(reference, test)
    peak = float(reference.data.max())
    if peak <= 0:
        raise ValueError("Reference maximum is not positive; PSNR is undefined")
    mse = float(np.mean((reference.data - test.data) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _moments(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float, float]:
    mu_x = float(x.mean())
    mu_y = float(y.mean())
    dx = x - mu_x
    dy = y - mu_y
    return mu_x, mu_y, float(np.mean(dx * dx)), float(np.mean(dy * dy)), float(np.mean(dx * dy))


def ssim_global(
    reference: SpectralCube,
    test: SpectralCube,
    c1: float | None = None,
    c2: float | None = None,
) -> tuple[list[float], float]:
    """Per-band SSIM with means, variances and covariance taken over the whole band.

    Defaults: c1 = (0.01 D)^2, c2 = (0.03 D)^2 with D the reference maximum.
    """
    _check_shapes(reference, test)
    dynamic_range = float(reference.data.max())
    c1 = (0.01 * dynamic_range) ** 2 if c1 is None else c1
    c2 = (0.03 * dynamic_range) ** 2 if c2 is None else c2
    values = []
    for band in range(reference.bands):
        mu_x, mu_y, var_x, var_y, cov_xy = _moments(reference.data[:, :, band], test.data[:, :, band])
        numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov_xy + c2)
        denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        if denominator == 0:
            # Both bands constant zero with no stabilization.
            values.append(1.0)
            continue
        values.append(numerator / denominator)
    return values, float(np.mean(values))


def quality_report(
    reference: SpectralCube,
    test: SpectralCube,
    c1: float | None = None,
    c2: float | None = None,
) -> QualityReport:
    bands, mean = ssim_global(reference, test, c1, c2)
    return QualityReport(
        psnr=psnr(reference, test),
        ssim_bands=bands,
        ssim_mean=mean,
        max_signal=float(reference.data.max()),
    )
