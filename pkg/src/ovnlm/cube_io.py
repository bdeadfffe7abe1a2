"""Spectral cube data model plus the MSC1 container and PGM band-stack formats.

MSC1 layout (little-endian throughout)::

    bytes 0-3    ASCII "MSC1"
    bytes 4-15   uint32 H, L, P
    bytes 16-    H*L*P float64 samples, row-major over (row, col), bands innermost
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging
import os
from pathlib import Path
import re
import struct
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"MSC1"
HEADER = struct.Struct("<4sIII")
SAMPLE_DTYPE = np.dtype("<f8")

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


class CubeFormatError(ValueError):
    """A file is not a well-formed MSC1 container."""


class BadMagicError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class ZeroDimensionError(CubeFormatError):
    pass


class NonFiniteSampleError(CubeFormatError):
    pass


class PixelFormatError(ValueError):
    """An image file uses a pixel encoding the band-stack importer cannot read."""


class DimensionMismatchError(ValueError):
    pass


class CubeIOError(OSError):
    """Filesystem failure, always carrying the offending path."""


class PixelCoord(NamedTuple):
    row: int
    col: int

    def flat(self, width: int) -> int:
        return self.row * width + self.col


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """Immutable H x L x P cube of float64 samples (band-interleaved by pixel)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if array.ndim != 3:
            raise ValueError(f"Cube data must be 3-D (H, L, P), got shape {array.shape}")
        if min(array.shape) < 1:
            raise ZeroDimensionError(f"Cube dimensions must all be >= 1, got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteSampleError("Cube contains NaN or infinite samples")
        array.flags.writeable = False
        object.__setattr__(self, "data", array)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, height: int, width: int) -> "SpectralCube":
        return cls(np.asarray(pixels, dtype=np.float64).reshape(height, width, -1))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def pixels(self) -> np.ndarray:
        """Read-only (H*L, P) view in row-major pixel order."""
        return self.data.reshape(self.n_pixels, self.bands)

    def contains(self, coord: PixelCoord) -> bool:
        return 0 <= coord.row < self.height and 0 <= coord.col < self.width

    def pixel(self, coord: PixelCoord) -> np.ndarray:
        if not self.contains(coord):
            raise IndexError(f"{coord} is outside a {self.height}x{self.width} cube")
        return self.data[coord.row, coord.col]

    def sample(self, row: int, col: int, band: int) -> float:
        return float(self.data[row, col, band])

    def band(self, index: int) -> "SpectralCube":
        return SpectralCube(self.data[:, :, index : index + 1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


def read_cube(path: str | os.PathLike[str]) -> SpectralCube:
    target = Path(path)
    try:
        raw = target.read_bytes()
    except OSError as exc:
        raise CubeIOError(f"Cannot read cube file {target}: {exc}") from exc

    if len(raw) < HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{target}: not an MSC1 file (magic {raw[:4]!r})")
        raise TruncatedPayloadError(f"{target}: header is {len(raw)} bytes, expected {HEADER.size}")

    magic, height, width, bands = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{target}: not an MSC1 file (magic {magic!r})")
    if 0 in (height, width, bands):
        raise ZeroDimensionError(f"{target}: zero dimension in header H={height} L={width} P={bands}")

    expected = height * width * bands * SAMPLE_DTYPE.itemsize
    payload = memoryview(raw)[HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{target}: payload has {len(payload)} bytes, expected {expected} for {height}x{width}x{bands}"
        )
    if len(payload) > expected:
        raise CubeFormatError(f"{target}: {len(payload) - expected} trailing bytes after payload")

    samples = np.frombuffer(payload, dtype=SAMPLE_DTYPE, count=height * width * bands)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteSampleError(f"{target}: payload contains NaN or infinite samples")
    return SpectralCube(samples.reshape(height, width, bands))


def write_cube(cube: SpectralCube, path: str | os.PathLike[str]) -> None:
    if not str(path):
        raise CubeIOError("Cannot write cube: empty output path")
    target = Path(path)
    header = HEADER.pack(MAGIC, cube.height, cube.width, cube.bands)
    payload = cube.data.astype(SAMPLE_DTYPE, copy=False).tobytes(order="C")
    try:
        target.write_bytes(header + payload)
    except OSError as exc:
        raise CubeIOError(f"Cannot write cube file {target}: {exc}") from exc
    logger.debug("Wrote %dx%dx%d cube to %s", cube.height, cube.width, cube.bands, target)


def read_pgm(path: str | os.PathLike[str]) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, into a 2-D float64 array."""
    target = Path(path)
    try:
        raw = target.read_bytes()
    except OSError as exc:
        raise CubeIOError(f"Cannot read image {target}: {exc}") from exc

    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        match = _PGM_TOKEN.match(raw, pos)
        if not match:
            raise PixelFormatError(f"{target}: incomplete PGM header")
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b"P5":
        raise PixelFormatError(f"{target}: unsupported image format {tokens[0][:8]!r} (binary P5 PGM only)")
    try:
        width, height, max_value = (int(token) for token in tokens[1:])
    except ValueError as exc:
        raise PixelFormatError(f"{target}: malformed PGM header") from exc
    if width < 1 or height < 1:
        raise PixelFormatError(f"{target}: invalid PGM size {width}x{height}")
    if not 0 < max_value <= 65535:
        raise PixelFormatError(f"{target}: unsupported PGM maxval {max_value}")

    # Exactly one whitespace byte separates the header from the raster.
    pos += 1
    dtype = np.dtype("u1") if max_value < 256 else np.dtype(">u2")
    count = width * height
    if len(raw) - pos < count * dtype.itemsize:
        raise PixelFormatError(f"{target}: raster truncated")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return values.reshape(height, width).astype(np.float64)


def write_pgm(path: str | os.PathLike[str], band: np.ndarray, max_value: int) -> None:
    if band.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {band.shape}")
    if not 0 < max_value <= 65535:
        raise PixelFormatError(f"Unsupported PGM maxval {max_value}")
    dtype = np.dtype("u1") if max_value < 256 else np.dtype(">u2")
    raster = np.clip(np.rint(band), 0, max_value).astype(dtype)
    height, width = band.shape
    header = f"P5\n{width} {height}\n{max_value}\n".encode("ascii")
    target = Path(path)
    try:
        target.write_bytes(header + raster.tobytes())
    except OSError as exc:
        raise CubeIOError(f"Cannot write image {target}: {exc}") from exc


def import_band_stack(paths: Sequence[str | os.PathLike[str]]) -> SpectralCube:
    """Stack grayscale PGM files into a cube, band i taken from file i."""
    if not paths:
        raise ValueError("At least one band image is required")
    bands = [read_pgm(path) for path in paths]
    first = bands[0].shape
    for path, band in zip(paths, bands):
        if band.shape != first:
            raise DimensionMismatchError(
                f"{path}: size {band.shape[1]}x{band.shape[0]} differs from {first[1]}x{first[0]}"
            )
    return SpectralCube(np.stack(bands, axis=2))


def export_band_stack(
    cube: SpectralCube,
    directory: str | os.PathLike[str],
    stem: str = "band",
) -> list[Path]:
    """Write one PGM per band; 8-bit when every sample fits, otherwise 16-bit."""
    out_dir = Path(directory)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CubeIOError(f"Cannot create directory {out_dir}: {exc}") from exc
    max_value = 255 if float(cube.data.max()) <= 255 else 65535
    written: list[Path] = []
    for index in range(cube.bands):
        target = out_dir / f"{stem}_{index:03d}.pgm"
        write_pgm(target, cube.data[:, :, index], max_value)
        written.append(target)
    return written
