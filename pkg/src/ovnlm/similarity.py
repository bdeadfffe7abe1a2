"""Probabilistic intensity similarity and per-pixel candidate preselection.

For noise level sigma, the similarity of two intensities is

    S(x_s, x_p) = exp(-(x_s - x_p)^2 / 4 sigma^2)
                  * (erf((2 x_s0 - x_s - x_p) / 2 sigma) + erf((x_s + x_p) / 2 sigma))
                  / (4 sigma |Omega| sqrt(pi))

and is treated as zero once |x_s - x_p| exceeds tau = 2 sqrt(2 ln varsigma) sigma.
Vector similarity is the product over bands, so a pixel p is a candidate for s
exactly when every band passes its own tau test.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy import special

from ovnlm.cube_io import PixelCoord, SpectralCube
from ovnlm.noise_model import CovarianceError, NoiseCovariance
from ovnlm.workers import map_blocks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityConfig:
    varsigma: float = 100.0
    omega_const: float = 1.0
    # Per-band maximum true intensity; None means "per-band max of the noisy cube".
    x_s0: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.varsigma >= 1.0:
            raise ValueError(f"varsigma must be >= 1, got {self.varsigma}")
        if not self.omega_const > 0:
            raise ValueError(f"omega_const must be > 0, got {self.omega_const}")
        if self.x_s0 is not None:
            object.__setattr__(self, "x_s0", tuple(float(v) for v in self.x_s0))
            if any(not v > 0 for v in self.x_s0):
                raise ValueError(f"x_s0 must be > 0 for every band, got {self.x_s0}")

    def with_x_s0_from(self, cube: SpectralCube) -> "SimilarityConfig":
        if self.x_s0 is not None:
            return self
        peaks = tuple(max(float(v), np.finfo(float).tiny) for v in cube.data.max(axis=(0, 1)))
        return SimilarityConfig(self.varsigma, self.omega_const, peaks)

    def x_s0_for(self, band: int) -> float:
        if self.x_s0 is None:
            raise ValueError("x_s0 is not set; call with_x_s0_from(cube) or pass it explicitly")
        return self.x_s0[band]


def cutoff_width(sigma: float | np.ndarray, varsigma: float) -> float | np.ndarray:
    """tau = 2 sqrt(2 ln varsigma) sigma; zero at varsigma == 1."""
    return 2.0 * math.sqrt(2.0 * math.log(varsigma)) * sigma


def erf(x: float | np.ndarray) -> float | np.ndarray:
    """Error function (2/sqrt(pi)) * integral_0^x exp(-t^2) dt."""
    result = special.erf(x)
    return float(result) if np.ndim(result) == 0 else result


def scalar_similarity(
    x_s: float,
    x_p: float,
    sigma: float,
    cfg: SimilarityConfig,
    band: int = 0,
) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    difference = x_s - x_p
    if abs(difference) > cutoff_width(sigma, cfg.varsigma):
        return 0.0
    x_s0 = cfg.x_s0_for(band)
    gaussian = math.exp(-(difference**2) / (4.0 * sigma**2))
    erf_sum = erf((2.0 * x_s0 - x_s - x_p) / (2.0 * sigma)) + erf((x_s + x_p) / (2.0 * sigma))
    return gaussian * erf_sum / (4.0 * sigma * cfg.omega_const * math.sqrt(math.pi))


def vector_similarity(
    pixel_s: Sequence[float] | np.ndarray,
    pixel_p: Sequence[float] | np.ndarray,
    sigmas: Sequence[float] | np.ndarray,
    cfg: SimilarityConfig,
) -> float:
    if not len(pixel_s) == len(pixel_p) == len(sigmas):
        raise ValueError(
            f"Length mismatch: I_s={len(pixel_s)}, I_p={len(pixel_p)}, sigmas={len(sigmas)}"
        )
    product = 1.0
    for band, (x_s, x_p, sigma) in enumerate(zip(pixel_s, pixel_p, sigmas)):
        product *= scalar_similarity(float(x_s), float(x_p), float(sigma), cfg, band)
        if product == 0.0:
            return 0.0
    return product


@dataclass(frozen=True, eq=False)
class CandidateSets:
    """Per-pixel candidate lists in CSR form, each list sorted row-major.

    ``indices is None`` denotes the full image domain for every pixel.
    """

    n_pixels: int
    indptr: np.ndarray | None = None
    indices: np.ndarray | None = None

    @classmethod
    def full(cls, n_pixels: int) -> "CandidateSets":
        return cls(n_pixels)

    @classmethod
    def singletons(cls, n_pixels: int) -> "CandidateSets":
        return cls(n_pixels, np.arange(n_pixels + 1, dtype=np.int64), np.arange(n_pixels, dtype=np.int64))

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int] | np.ndarray]) -> "CandidateSets":
        arrays = [np.asarray(items, dtype=np.int64) for items in lists]
        sizes = np.array([len(items) for items in arrays], dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        indices = np.concatenate(arrays) if arrays else np.empty(0, dtype=np.int64)
        return cls(len(arrays), indptr, indices)

    @property
    def is_full(self) -> bool:
        return self.indices is None

    def for_pixel(self, flat: int) -> np.ndarray:
        if self.indices is None:
            return np.arange(self.n_pixels, dtype=np.int64)
        return self.indices[self.indptr[flat] : self.indptr[flat + 1]]

    def coords(self, flat: int, width: int) -> list[PixelCoord]:
        return [PixelCoord(int(p) // width, int(p) % width) for p in self.for_pixel(flat)]

    def sizes(self) -> np.ndarray:
        if self.indices is None:
            return np.full(self.n_pixels, self.n_pixels, dtype=np.int64)
        return np.diff(self.indptr)

    def mean_size(self) -> float:
        return float(self.sizes().mean())

    def count_cube(self, height: int, width: int) -> SpectralCube:
        """Candidate counts as a single-band cube, for inspecting selectivity."""
        return SpectralCube(self.sizes().astype(np.float64).reshape(height, width, 1))


def band_sigmas(cov: NoiseCovariance) -> np.ndarray:
    sigmas = cov.sigmas
    zero = [int(i) for i in np.flatnonzero(sigmas == 0)]
    if zero:
        raise CovarianceError(
            f"Bands {zero} have zero noise variance, so preselection thresholds collapse; "
            "regularize the covariance diagonal (--cov-floor / NoiseCovariance.with_floor)"
        )
    return sigmas


def build_candidate_sets(
    cube: SpectralCube,
    cov: NoiseCovariance,
    cfg: SimilarityConfig,
    workers: int | None = None,
) -> CandidateSets:
    """Keep p for s when |I(s)_i - I(p)_i| <= tau_i in every band.

    Each pixel queries the per-band sorted intensities, takes the band with the
    narrowest hit range and filters those hits against all bands.
    """
    if cov.bands != cube.bands:
        raise CovarianceError(f"Covariance has {cov.bands} bands, cube has {cube.bands}")
    taus = cutoff_width(band_sigmas(cov), cfg.varsigma)
    values = cube.pixels
    n_pixels = cube.n_pixels
    order = np.argsort(values, axis=0, kind="stable")
    ordered = np.take_along_axis(values, order, axis=0)
    # Widened query bounds; the exact predicate is re-applied afterwards.
    slack = 1e-9 * (np.abs(values) + taus)
    lows = values - taus - slack
    highs = values + taus + slack
    lists: list[np.ndarray | None] = [None] * n_pixels

    def select(start: int, stop: int) -> None:
        for flat in range(start, stop):
            first = np.array([np.searchsorted(ordered[:, b], lows[flat, b], "left") for b in range(cube.bands)])
            last = np.array([np.searchsorted(ordered[:, b], highs[flat, b], "right") for b in range(cube.bands)])
            band = int(np.argmin(last - first))
            hits = order[first[band] : last[band], band]
            keep = np.all(np.abs(values[hits] - values[flat]) <= taus, axis=1)
            lists[flat] = np.sort(hits[keep])

    map_blocks(select, n_pixels, workers)
    candidates = CandidateSets.from_lists(lists)  # type: ignore[arg-type]
    logger.info(
        "Preselection varsigma=%g kept %.1f of %d pixels on average",
        cfg.varsigma,
        candidates.mean_size(),
        n_pixels,
    )
    return candidates


def scan_candidate_sets(cube: SpectralCube, cov: NoiseCovariance, cfg: SimilarityConfig) -> CandidateSets:
    """Naive all-pairs scan of the same predicate; reference for build_candidate_sets."""
    taus = cutoff_width(band_sigmas(cov), cfg.varsigma)
    values = cube.pixels
    lists = []
    for flat in range(cube.n_pixels):
        keep = [p for p in range(cube.n_pixels) if all(abs(values[flat] - values[p]) <= taus)]
        lists.append(keep)
    return CandidateSets.from_lists(lists)
