"""Vector non-local means: Mahalanobis patch distance, weights and the filter.

The filter restores each pixel s as a convex combination of candidate pixels p,

    I_out(s) = sum_p chi(p) I_in(p) / sum_p chi(p),
    chi(p)   = exp(-d(s, p) / h^2),
    d(s, p)  = sum_k w(k) (I(s-k) - I(p-k))^T Phi^-1 (I(s-k) - I(p-k)),

over the whole image or over a preselected candidate set per pixel.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
import logging

import numpy as np
from scipy import linalg

from ovnlm.cube_io import PixelCoord, SpectralCube
from ovnlm.patches import KERNELS, PatchGeometry, kernel_weights, pair_slots
from ovnlm.similarity import CandidateSets
from ovnlm.workers import map_blocks

logger = logging.getLogger(__name__)

METRIC_SHAPES = ("identity", "diagonal", "full")
# Relative size of the ridge added to an ill-conditioned Phi.
RIDGE_SCALE = 1e-8


@dataclass(frozen=True, eq=False)
class FilterParams:
    h: float
    phi: np.ndarray
    patch_radius: int = 3
    metric_shape: str = "full"
    kernel: str = "uniform"
    kernel_std: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"h must be a finite positive number, got {self.h}")
        phi = np.array(self.phi, dtype=np.float64, copy=True)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1] or phi.shape[0] < 1:
            raise ValueError(f"Phi must be a square matrix, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("Phi contains NaN or infinite entries")
        scale = max(float(np.abs(phi).max()), np.finfo(float).tiny)
        if np.abs(phi - phi.T).max() > 1e-10 * scale:
            raise ValueError("Phi must be symmetric")
        phi = 0.5 * (phi + phi.T)
        if linalg.eigvalsh(phi)[0] < -1e-10 * max(np.trace(phi), np.finfo(float).tiny):
            raise ValueError("Phi must be positive semidefinite")
        if self.patch_radius < 0:
            raise ValueError(f"patch_radius must be >= 0, got {self.patch_radius}")
        if self.metric_shape not in METRIC_SHAPES:
            raise ValueError(f"Unsupported metric shape: {self.metric_shape}")
        if self.metric_shape == "identity":
            scale = float(phi[0, 0])
            if not scale > 0 or np.abs(phi - scale * np.eye(phi.shape[0])).max() > 1e-12 * scale:
                raise ValueError("Identity metric shape needs Phi = c * Id with c > 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"Unsupported intra-patch kernel: {self.kernel}")
        if self.kernel == "gaussian" and not self.kernel_std > 0:
            raise ValueError(f"Gaussian kernel std must be > 0, got {self.kernel_std}")
        phi.flags.writeable = False
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "phi", phi)

    @classmethod
    def identity(cls, bands: int, h: float, **kwargs) -> "FilterParams":
        kwargs.setdefault("metric_shape", "identity")
        return cls(h=h, phi=np.eye(bands), **kwargs)

    @property
    def bands(self) -> int:
        return self.phi.shape[0]

    @property
    def patch_size(self) -> int:
        return (2 * self.patch_radius + 1) ** 2

    def with_h(self, h: float) -> "FilterParams":
        return replace(self, h=h)

    def with_phi(self, phi: np.ndarray) -> "FilterParams":
        return replace(self, phi=phi)

    def geometry(self, height: int, width: int) -> PatchGeometry:
        return PatchGeometry(height, width, self.patch_radius, self.kernel, self.kernel_std)


def metric_factor(phi: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L of Phi (or Phi + eps I when Phi is near singular).

    eps = 1e-8 * trace(Phi) / P; Phi^-1 = L^-T L^-1.
    """
    bands = phi.shape[0]
    ridge = RIDGE_SCALE * float(np.trace(phi)) / bands
    if linalg.eigvalsh(phi)[0] < ridge:
        phi = phi + ridge * np.eye(bands)
    try:
        return linalg.cholesky(phi, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("Phi is singular even after regularization") from exc


def resolve_coord(cube: SpectralCube, coord: PixelCoord) -> PixelCoord:
    coord = PixelCoord(*coord)
    if not cube.contains(coord):
        raise IndexError(f"{coord} is outside a {cube.height}x{cube.width} cube")
    return coord


def patch_distance(cube: SpectralCube, s: PixelCoord, p: PixelCoord, params: FilterParams) -> float:
    """Weighted Mahalanobis distance between the patches around s and p."""
    s = resolve_coord(cube, s)
    p = resolve_coord(cube, p)
    if params.bands != cube.bands:
        raise ValueError(f"Phi is {params.bands}x{params.bands} but cube has {cube.bands} bands")
    if s == p:
        return 0.0
    slots_s, slots_p = pair_slots(cube.height, cube.width, params.patch_radius, s, p)
    values = cube.pixels
    deltas = values[slots_s] - values[slots_p]
    factor = metric_factor(params.phi)
    solved = linalg.cho_solve((factor, True), deltas.T).T
    weights = kernel_weights(params.patch_radius, params.kernel, params.kernel_std)
    return float(np.sum(weights * np.einsum("kp,kp->k", deltas, solved)))


class FilterEngine:
    """Per-invocation state: metric factor, whitened patch vectors and geometry."""

    def __init__(self, cube: SpectralCube, params: FilterParams) -> None:
        if params.bands != cube.bands:
            raise ValueError(f"Phi is {params.bands}x{params.bands} but cube has {cube.bands} bands")
        self.cube = cube
        self.params = params
        self.geometry = params.geometry(cube.height, cube.width)
        self.values = cube.pixels
        factor = metric_factor(params.phi)
        self.factor_inverse = linalg.solve_triangular(factor, np.eye(cube.bands), lower=True)
        self.features = self.geometry.features(self.values @ self.factor_inverse.T)
        self.inv_h2 = 1.0 / (params.h * params.h)

    def chi(self, flat: int, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (chi, feature differences Z[p] - Z[s]) for the candidate pixels."""
        differences = self.features[candidates]
        differences -= self.features[flat]
        distances = np.einsum("ij,ij->i", differences, differences)
        return np.exp(-distances * self.inv_h2), differences

    def restore(self, flat: int, candidates: np.ndarray) -> np.ndarray:
        chi, _ = self.chi(flat, candidates)
        return (chi @ self.values[candidates]) / chi.sum()

    def chi_gradients(
        self,
        flat: int,
        candidates: np.ndarray,
        chi: np.ndarray,
        differences: np.ndarray,
    ) -> np.ndarray:
        """d chi(p) / d I_in(s), one row per candidate (candidates sorted ascending).

        Slots of s's own patch reading s contribute with +, slots of p's patch
        reading s with -; in feature space that is -(sum over own slots) +
        (sum over reader slots) of sqrt(w(k)) * (Z[p] - Z[s]) restricted to slot k.
        """
        bands = self.cube.bands
        per_slot = differences.reshape(len(candidates), self.geometry.size, bands)
        root_weights = self.geometry.root_weights

        own = self.geometry.self_slots(flat)
        pull = -np.einsum("k,mkp->mp", root_weights[own], per_slot[:, own, :])

        readers, slots = self.geometry.readers(flat)
        positions = np.searchsorted(candidates, readers)
        positions = np.minimum(positions, len(candidates) - 1)
        present = candidates[positions] == readers
        if np.any(present):
            positions, slots = positions[present], slots[present]
            contributions = per_slot[positions, slots, :] * root_weights[slots, None]
            np.add.at(pull, positions, contributions)

        return (-2.0 * self.inv_h2) * chi[:, None] * (pull @ self.factor_inverse)

    def jacobian(self, flat: int, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (restored pixel f(s), P x P Jacobian d f(s) / d I_in(s)), candidates frozen."""
        chi, differences = self.chi(flat, candidates)
        neighbours = self.values[candidates]
        total = chi.sum()
        restored = (chi @ neighbours) / total
        gradients = self.chi_gradients(flat, candidates, chi, differences)

        position = int(np.searchsorted(candidates, flat))
        self_chi = chi[position] if position < len(candidates) and candidates[position] == flat else 0.0
        numerator = neighbours.T @ gradients + self_chi * np.eye(self.cube.bands)
        jac = numerator / total - np.outer(restored, gradients.sum(axis=0)) / total
        return restored, jac

    def denoise(self, candidates: CandidateSets, workers: int | None = None) -> np.ndarray:
        n_pixels = self.cube.n_pixels
        if candidates.n_pixels != n_pixels:
            raise ValueError(f"Candidate sets cover {candidates.n_pixels} pixels, cube has {n_pixels}")
        restored = np.empty_like(self.values)

        def run(start: int, stop: int) -> None:
            for flat in range(start, stop):
                restored[flat] = self.restore(flat, candidates.for_pixel(flat))

        map_blocks(run, n_pixels, workers)
        return restored


def candidate_indices(cube: SpectralCube, candidates: Sequence[PixelCoord] | np.ndarray) -> np.ndarray:
    array = np.asarray(candidates)
    if array.ndim == 2:
        coords = [resolve_coord(cube, PixelCoord(int(r), int(c))) for r, c in array]
        return np.array([coord.flat(cube.width) for coord in coords], dtype=np.int64)
    indices = array.astype(np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= cube.n_pixels):
        raise IndexError("Candidate index outside the cube")
    return indices


def vnlm_weights(
    cube: SpectralCube,
    s: PixelCoord,
    candidates: Sequence[PixelCoord] | np.ndarray,
    params: FilterParams,
) -> np.ndarray:
    """Normalized weights omega(s, p), aligned with the given candidate order."""
    s = resolve_coord(cube, s)
    indices = candidate_indices(cube, candidates)
    flat = s.flat(cube.width)
    if indices.size == 0 or not np.any(indices == flat):
        raise ValueError("Candidate list must be non-empty and contain s")
    chi, _ = FilterEngine(cube, params).chi(flat, indices)
    return chi / chi.sum()


def vnlm_denoise(
    cube: SpectralCube,
    params: FilterParams,
    candidates: CandidateSets | None = None,
    workers: int | None = None,
) -> SpectralCube:
    """Vector NLM over the full domain (candidates None) or over preselected sets."""
    sets = candidates if candidates is not None else CandidateSets.full(cube.n_pixels)
    restored = FilterEngine(cube, params).denoise(sets, workers)
    return SpectralCube.from_pixels(restored, cube.height, cube.width)


def scalar_nlm_denoise(
    band: SpectralCube,
    h: float,
    a: float,
    r: int = 3,
    workers: int | None = None,
) -> SpectralCube:
    """Classic single-band NLM with a Gaussian-weighted patch distance over the full image."""
    if band.bands != 1:
        raise ValueError(f"scalar NLM takes a single band, got {band.bands}")
    if not a > 0:
        raise ValueError(f"Gaussian kernel std must be > 0, got {a}")
    params = FilterParams.identity(1, h, patch_radius=r, kernel="gaussian", kernel_std=a)
    return vnlm_denoise(band, params, None, workers)


def bandwise_nlm_denoise(
    cube: SpectralCube,
    h: float,
    a: float,
    r: int = 3,
    workers: int | None = None,
) -> SpectralCube:
    """Run scalar NLM on each band separately and restack."""
    bands = [scalar_nlm_denoise(cube.band(i), h, a, r, workers).data for i in range(cube.bands)]
    return SpectralCube(np.concatenate(bands, axis=2))
