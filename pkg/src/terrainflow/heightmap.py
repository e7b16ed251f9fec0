"""Heightmap grid type, post-processing filters, resampling and TRB1 file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SIZE = 225
DEFAULT_CELL_SIZE_M = 0.025
DEFAULT_H0_M = 10 * DEFAULT_CELL_SIZE_M

TRB_MAGIC = b"TRB1"
_HEADER = struct.Struct("<4sIIff")

BLUR_KERNEL_SIZE = 5
BLUR_SIGMA = 1.0


class TerrainFormatError(ValueError):
    """A terrain file could not be parsed; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True, eq=False)
class Heightmap:
    """Row-major grid of heights in meters.

    ``values[row, col]``; rows run along y, cols along x.
    """

    values: np.ndarray
    cell_size_m: float = DEFAULT_CELL_SIZE_M
    h0_m: float = DEFAULT_H0_M

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ValueError(f"heightmap must be a non-empty 2D grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("heightmap values must be finite")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")
        if self.h0_m <= 0:
            raise ValueError("h0_m must be positive")
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def replace(self, values: np.ndarray) -> Heightmap:
        return Heightmap(values, self.cell_size_m, self.h0_m)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Heightmap):
            return NotImplemented
        return (
            self.cell_size_m == other.cell_size_m
            and self.h0_m == other.h0_m
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )


def blur_kernel_1d(size: int = BLUR_KERNEL_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return weights / weights.sum()


def blur_kernel_2d(size: int = BLUR_KERNEL_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    k = blur_kernel_1d(size, sigma)
    return np.outer(k, k)


def _convolve_axis(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    padded = np.pad(values, pad, mode="edge")
    n = values.shape[axis]
    out = np.zeros_like(values)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def blur_grid(values: np.ndarray) -> np.ndarray:
    """5x5, sigma=1 Gaussian blur of a raw grid with clamp-to-edge borders."""
    kernel = blur_kernel_1d()
    out = _convolve_axis(np.asarray(values, dtype=np.float64), kernel, axis=0)
    return _convolve_axis(out, kernel, axis=1)


def gaussian_blur(h: Heightmap) -> Heightmap:
    return h.replace(blur_grid(h.values))


def rescale_heights(
    raw: np.ndarray,
    h0_m: float = DEFAULT_H0_M,
    cell_size_m: float = DEFAULT_CELL_SIZE_M,
) -> Heightmap:
    """Map raw heights in [-1, 1] to [0, h0_m]; out-of-range values are clamped first."""
    if h0_m <= 0:
        raise ValueError("h0_m must be positive")
    raw = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
    return Heightmap((raw + 1.0) * 0.5 * h0_m, cell_size_m, h0_m)


def _bilinear(values: np.ndarray, rows_at: np.ndarray, cols_at: np.ndarray) -> np.ndarray:
    n_r, n_c = values.shape
    r0 = np.clip(np.floor(rows_at).astype(int), 0, max(n_r - 2, 0))
    c0 = np.clip(np.floor(cols_at).astype(int), 0, max(n_c - 2, 0))
    r1 = np.minimum(r0 + 1, n_r - 1)
    c1 = np.minimum(c0 + 1, n_c - 1)
    fr = np.clip(rows_at - r0, 0.0, 1.0)[:, None]
    fc = np.clip(cols_at - c0, 0.0, 1.0)[None, :]
    top = values[np.ix_(r0, c0)] * (1 - fc) + values[np.ix_(r0, c1)] * fc
    bottom = values[np.ix_(r1, c0)] * (1 - fc) + values[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def resample(h: Heightmap, new_cell_size_m: float) -> Heightmap:
    """Bilinear resampling onto a grid with (approximately) the requested spacing.

    Grid nodes sit at ``i * cell_size_m``, so the extent is ``(n - 1) * cell``.
    The new node count is rounded so the extent is kept exactly; the stored
    cell size is the one actually realized, which differs from the request by
    less than one part in the node count. On non-square grids the row
    spacing may differ slightly from the stored (column) spacing.
    """
    if new_cell_size_m <= 0:
        raise ValueError("new_cell_size_m must be positive")
    extent_r = (h.rows - 1) * h.cell_size_m
    extent_c = (h.cols - 1) * h.cell_size_m
    n_r = int(round(extent_r / new_cell_size_m)) + 1
    n_c = int(round(extent_c / new_cell_size_m)) + 1
    if n_r < 2 or n_c < 2:
        raise ValueError(f"resampled grid would be {n_r}x{n_c}; at least 2x2 required")
    rows_at = np.linspace(0.0, h.rows - 1, n_r)
    cols_at = np.linspace(0.0, h.cols - 1, n_c)
    values = _bilinear(h.values, rows_at, cols_at)
    if n_c > 1 and extent_c > 0:
        realized = extent_c / (n_c - 1)
    else:
        realized = extent_r / (n_r - 1)
    return Heightmap(values, realized, h.h0_m)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_terrain(h: Heightmap, path: str | Path, metadata: dict | None = None) -> None:
    """Write ``h`` as TRB1 (little-endian f32); ``metadata`` goes to a JSON sidecar."""
    path = Path(path)
    header = _HEADER.pack(TRB_MAGIC, h.rows, h.cols, h.cell_size_m, h.h0_m)
    body = np.ascontiguousarray(h.values, dtype="<f4").tobytes()
    path.write_bytes(header + body)
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, sort_keys=True, indent=1) + "\n")


def read_terrain(path: str | Path) -> Heightmap:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TerrainFormatError("magic", "file shorter than magic")
    if data[:4] != TRB_MAGIC:
        raise TerrainFormatError("magic", f"bad magic {data[:4]!r}, expected {TRB_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TerrainFormatError("header", f"truncated header ({len(data)} of {_HEADER.size} bytes)")
    _, rows, cols, cell, h0 = _HEADER.unpack_from(data)
    if rows == 0:
        raise TerrainFormatError("rows", "must be positive")
    if cols == 0:
        raise TerrainFormatError("cols", "must be positive")
    if not np.isfinite(cell) or cell <= 0:
        raise TerrainFormatError("cell_size_m", f"must be positive, got {cell}")
    if not np.isfinite(h0) or h0 <= 0:
        raise TerrainFormatError("h0_m", f"must be positive, got {h0}")
    expected = rows * cols * 4
    got = len(data) - _HEADER.size
    if got != expected:
        raise TerrainFormatError(
            "values", f"dimension mismatch: {rows}x{cols} needs {expected} bytes, found {got}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    values = values.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise TerrainFormatError("values", "non-finite height")
    return Heightmap(values, float(cell), float(h0))


def read_sidecar(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def export_pgm(h: Heightmap, path: str | Path) -> None:
    """16-bit binary PGM with [0, h0_m] mapped linearly onto [0, 65535]."""
    scaled = np.clip(h.values / h.h0_m, 0.0, 1.0) * 65535.0
    pixels = np.rint(scaled).astype(">u2")
    header = f"P5\n{h.cols} {h.rows}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
