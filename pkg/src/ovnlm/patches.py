"""Patch geometry shared by the filter and its Jacobian.

Patches use symmetric (mirror) extension at the borders, so a patch slot may
read a pixel that also sits at another slot. Everything downstream works on
the slot -> pixel index table instead of on coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import math

import numpy as np

KERNELS = ("uniform", "gaussian")


def mirror_index(index: np.ndarray, size: int) -> np.ndarray:
    """Map any integer index into [0, size) by symmetric extension (edge sample repeated)."""
    period = 2 * size
    wrapped = np.mod(index, period)
    return np.where(wrapped >= size, period - 1 - wrapped, wrapped)


def patch_offsets(radius: int) -> np.ndarray:
    """(K, 2) array of (drow, dcol) offsets, row-major over the (2r+1)^2 window."""
    span = np.arange(-radius, radius + 1)
    rows, cols = np.meshgrid(span, span, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def kernel_weights(radius: int, kernel: str = "uniform", std: float = 1.0) -> np.ndarray:
    """Intra-patch weights w(k): 1 everywhere, or G_a(k) = exp(-|k|^2 / 2a^2) / (2 pi a^2)."""
    offsets = patch_offsets(radius)
    if kernel == "uniform":
        return np.ones(len(offsets))
    if kernel == "gaussian":
        if not std > 0:
            raise ValueError(f"Gaussian kernel std must be > 0, got {std}")
        squared = np.sum(offsets.astype(np.float64) ** 2, axis=1)
        return np.exp(-squared / (2.0 * std**2)) / (2.0 * math.pi * std**2)
    raise ValueError(f"Unsupported intra-patch kernel: {kernel}")


def pair_slots(
    height: int,
    width: int,
    radius: int,
    s: tuple[int, int],
    p: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices read by the patches around s and p (slot k reads s - k, p - k)."""
    offsets = patch_offsets(radius)
    slots = []
    for row, col in (s, p):
        rows = mirror_index(row - offsets[:, 0], height)
        cols = mirror_index(col - offsets[:, 1], width)
        slots.append(rows * width + cols)
    return slots[0], slots[1]


@dataclass(frozen=True)
class PatchGeometry:
    height: int
    width: int
    radius: int
    kernel: str = "uniform"
    kernel_std: float = 1.0

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError(f"Patch radius must be >= 0, got {self.radius}")
        if self.kernel not in KERNELS:
            raise ValueError(f"Unsupported intra-patch kernel: {self.kernel}")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def size(self) -> int:
        return (2 * self.radius + 1) ** 2

    @cached_property
    def offsets(self) -> np.ndarray:
        return patch_offsets(self.radius)

    @cached_property
    def weights(self) -> np.ndarray:
        return kernel_weights(self.radius, self.kernel, self.kernel_std)

    @cached_property
    def root_weights(self) -> np.ndarray:
        return np.sqrt(self.weights)

    @cached_property
    def index(self) -> np.ndarray:
        """(N, K) table: index[q, k] is the flat pixel read by slot k of q's patch."""
        rows = np.arange(self.height)[:, None, None] - self.offsets[None, None, :, 0]
        cols = np.arange(self.width)[None, :, None] - self.offsets[None, None, :, 1]
        rows = mirror_index(rows, self.height)
        cols = mirror_index(cols, self.width)
        return (rows * self.width + cols).reshape(self.n_pixels, self.size)

    @cached_property
    def _reverse(self) -> tuple[np.ndarray, np.ndarray]:
        flat = self.index.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(self.n_pixels + 1), side="left")
        return order, bounds

    def self_slots(self, flat: int) -> np.ndarray:
        """Slots of pixel ``flat``'s own patch that read ``flat`` itself (k = 0 plus mirror repeats)."""
        return np.flatnonzero(self.index[flat] == flat)

    def readers(self, flat: int) -> tuple[np.ndarray, np.ndarray]:
        """All (q, k) with index[q, k] == flat, i.e. patches that read pixel ``flat``."""
        order, bounds = self._reverse
        entries = order[bounds[flat] : bounds[flat + 1]]
        return entries // self.size, entries % self.size

    def features(self, whitened_pixels: np.ndarray) -> np.ndarray:
        """(N, K*P) patch vectors, slot k scaled by sqrt(w(k)).

        With pixels whitened by the metric factor, squared Euclidean distance
        between two rows equals the weighted Mahalanobis patch distance.
        """
        gathered = whitened_pixels[self.index] * self.root_weights[None, :, None]
        return np.ascontiguousarray(gathered.reshape(self.n_pixels, -1))
