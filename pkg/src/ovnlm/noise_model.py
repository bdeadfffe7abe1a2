"""Additive Gaussian noise injection and robust (MAD) noise covariance estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
import math
import os
from pathlib import Path

import numpy as np
from scipy import linalg

from ovnlm.cube_io import CubeIOError, SpectralCube
from ovnlm.workers import map_blocks

logger = logging.getLogger(__name__)

# Consistency factor turning a MAD into a Gaussian standard deviation.
MAD_SCALE = 1.4826
PSD_TOLERANCE = 1e-10


class CovarianceError(ValueError):
    pass


class DegenerateBandError(CovarianceError):
    """A band has zero MAD, so correlations involving it are undefined."""


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    """P x P inter-band noise covariance; symmetric by construction."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.matrix, dtype=np.float64, copy=True)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 1:
            raise CovarianceError(f"Covariance must be a non-empty square matrix, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise CovarianceError("Covariance contains NaN or infinite entries")
        array = 0.5 * (array + array.T)
        if np.any(np.diag(array) < 0):
            raise CovarianceError("Covariance diagonal entries must be >= 0")
        array.flags.writeable = False
        object.__setattr__(self, "matrix", array)

    @classmethod
    def isotropic(cls, bands: int, variance: float) -> "NoiseCovariance":
        return cls(np.eye(bands) * float(variance))

    @property
    def bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.diagonal)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def min_eigenvalue(self) -> float:
        return float(linalg.eigvalsh(self.matrix)[0])

    def is_psd(self) -> bool:
        scale = max(self.trace, np.finfo(float).tiny)
        return self.min_eigenvalue() >= -PSD_TOLERANCE * scale

    def project_psd(self) -> "NoiseCovariance":
        """Clip negative eigenvalues to zero; PSD input is returned unchanged."""
        values, vectors = linalg.eigh(self.matrix)
        if values[0] >= 0:
            return self
        clipped = (vectors * np.clip(values, 0.0, None)) @ vectors.T
        return NoiseCovariance(clipped)

    def with_floor(self, floor: float) -> "NoiseCovariance":
        """Raise every diagonal entry below ``floor`` up to it."""
        if floor < 0:
            raise CovarianceError(f"Covariance floor must be >= 0, got {floor}")
        array = self.matrix.copy()
        diagonal = np.diag(array)
        np.fill_diagonal(array, np.maximum(diagonal, floor))
        return NoiseCovariance(array)

    def symmetric_factor(self) -> np.ndarray:
        """Return F with F @ F.T == matrix, via eigendecomposition (works for singular PSD)."""
        if not self.is_psd():
            raise CovarianceError(
                f"Covariance is not positive semidefinite (min eigenvalue {self.min_eigenvalue():.3e})"
            )
        values, vectors = linalg.eigh(self.matrix)
        return vectors * np.sqrt(np.clip(values, 0.0, None))


def add_gaussian_noise(
    cube: SpectralCube,
    cov: NoiseCovariance,
    seed: int,
    workers: int | None = None,
) -> SpectralCube:
    """Return ``cube + n`` with n ~ N(0, cov) i.i.d. per pixel.

    Each image row draws from its own Philox stream keyed by (seed, row), so
    the output depends only on the seed.
    """
    if cov.bands != cube.bands:
        raise CovarianceError(f"Covariance is {cov.bands}x{cov.bands} but cube has {cube.bands} bands")
    if seed < 0:
        raise ValueError(f"Seed must be a non-negative integer, got {seed}")
    factor = cov.symmetric_factor()
    if not np.any(factor):
        return SpectralCube(cube.data)

    noisy = np.array(cube.data, copy=True)

    def fill_rows(start: int, stop: int) -> None:
        for row in range(start, stop):
            stream = np.random.SeedSequence(seed, spawn_key=(row,))
            rng = np.random.Generator(np.random.Philox(stream))
            draws = rng.standard_normal((cube.width, cube.bands))
            noisy[row] += draws @ factor.T

    map_blocks(fill_rows, cube.height, workers)
    return SpectralCube(noisy)


def sigma_for_target_psnr(cube: SpectralCube, target_psnr: float) -> float:
    """Noise sigma whose i.i.d. injection gives the requested expected input PSNR."""
    peak = float(cube.data.max())
    if peak <= 0:
        raise ValueError("Cube maximum is not positive; PSNR reference signal is undefined")
    if math.isnan(target_psnr) or target_psnr == -math.inf:
        raise ValueError(f"Target PSNR must be finite or +inf, got {target_psnr}")
    if target_psnr == math.inf:
        return 0.0
    return peak * 10.0 ** (-target_psnr / 20.0)


def _mad_sigma(values: np.ndarray) -> np.ndarray:
    center = np.median(values, axis=0)
    return MAD_SCALE * np.median(np.abs(values - center), axis=0)


def estimate_noise_covariance_mad(
    cube: SpectralCube,
    strict: bool = False,
    diagonal_only: bool = False,
) -> NoiseCovariance:
    """Estimate the noise covariance from a noisy cube with the MAD rule.

    Diagonal: (1.4826 * MAD(I_i))^2. Off-diagonal (i, j), with a = 1/sigma_i and
    b = 1/sigma_j: 1.4826^2 / (4ab) * [MAD(a I_i + b I_j)^2 - MAD(a I_i - b I_j)^2].
    The result is symmetrized and projected onto the PSD cone.
    """
    if cube.n_pixels < 2:
        raise ValueError("MAD covariance estimation needs at least 2 pixels")
    values = cube.pixels
    sigmas = _mad_sigma(values)
    bands = cube.bands
    estimate = np.diag(sigmas**2)
    if diagonal_only or bands == 1:
        return NoiseCovariance(estimate)

    degenerate = [int(i) for i in np.flatnonzero(sigmas == 0)]
    if degenerate:
        if strict:
            raise DegenerateBandError(
                f"Bands {degenerate} have zero MAD; off-diagonal covariance is undefined "
                "(use diagonal-only estimation or drop constant bands)"
            )
        logger.warning("Bands %s have zero MAD; their off-diagonal covariance is set to 0", degenerate)

    pairs = [(i, j) for i in range(bands) for j in range(i + 1, bands) if sigmas[i] > 0 and sigmas[j] > 0]
    if pairs:
        rows = np.array([i for i, _ in pairs])
        cols = np.array([j for _, j in pairs])
        a = 1.0 / sigmas[rows]
        b = 1.0 / sigmas[cols]
        summed = values[:, rows] * a + values[:, cols] * b
        differenced = values[:, rows] * a - values[:, cols] * b
        off_diagonal = (_mad_sigma(summed) ** 2 - _mad_sigma(differenced) ** 2) / (4.0 * a * b)
        estimate[rows, cols] = off_diagonal
        estimate[cols, rows] = off_diagonal

    return NoiseCovariance(estimate).project_psd()


def read_covariance_csv(path: str | os.PathLike[str]) -> NoiseCovariance:
    target = Path(path)
    try:
        with target.open(newline="", encoding="utf-8") as handle:
            rows = [row for row in csv.reader(handle) if row and any(cell.strip() for cell in row)]
    except OSError as exc:
        raise CubeIOError(f"Cannot read covariance file {target}: {exc}") from exc
    try:
        matrix = np.array([[float(cell) for cell in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise CovarianceError(f"{target}: covariance rows must be comma-separated numbers") from exc
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise CovarianceError(f"{target}: expected P rows of P values, got {len(rows)} ragged/non-square rows")
    return NoiseCovariance(matrix)


def write_covariance_csv(cov: NoiseCovariance, path: str | os.PathLike[str]) -> None:
    target = Path(path)
    try:
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            for row in cov.matrix:
                writer.writerow([repr(float(value)) for value in row])
    except OSError as exc:
        raise CubeIOError(f"Cannot write covariance file {target}: {exc}") from exc
