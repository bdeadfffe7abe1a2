"""Synthetic clean cubes for benchmarks, demos and tests."""

from __future__ import annotations

import numpy as np

from ovnlm.cube_io import SpectralCube


def piecewise_constant_cube(
    height: int,
    width: int,
    bands: int,
    regions: int = 6,
    seed: int = 0,
    peak: float = 255.0,
) -> SpectralCube:
    """Voronoi regions with one spectrum each.

    A region's spectrum is a shared brightness level modulated per band, so
    bands are strongly correlated, as in real multispectral scenes.
    """
    if min(height, width, bands) < 1:
        raise ValueError(f"Cube dimensions must be positive, got {height}x{width}x{bands}")
    if regions < 1:
        raise ValueError(f"regions must be >= 1, got {regions}")
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(regions, 2)) * [height, width]
    rows, cols = np.mgrid[0:height, 0:width]
    squared = (rows[..., None] - centers[:, 0]) ** 2 + (cols[..., None] - centers[:, 1]) ** 2
    labels = np.argmin(squared, axis=2)

    levels = rng.uniform(0.15, 0.85, size=regions)
    modulation = 1.0 + 0.25 * rng.uniform(-1.0, 1.0, size=(regions, bands))
    spectra = np.clip(levels[:, None] * modulation, 0.0, 1.0) * peak
    return SpectralCube(spectra[labels])
