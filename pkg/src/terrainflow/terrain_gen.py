"""Procedural terrain generator behind the (state, seed) -> heightmap contract.

The generator stands in for a trained conditional GAN: control points shape
the large-scale relief through Gaussian bumps and dips, and a seeded
diamond-square field only adds small-scale detail. Its output follows the
same post-processing as a network generator would: raw heights normalized to
[-1, 1], blurred, then rescaled to [0, h0].
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .heightmap import (
    DEFAULT_CELL_SIZE_M,
    DEFAULT_H0_M,
    DEFAULT_SIZE,
    Heightmap,
    blur_grid,
    rescale_heights,
)
from .mdp import PIXELS_PER_CELL, ControlPoint, PointKind, State

GENERATOR_ID = "procedural-v1"


class TerrainGenerator(Protocol):
    generator_id: str

    def __call__(self, state: State, seed: int) -> Heightmap: ...


@dataclass(frozen=True)
class GeneratorConfig:
    kernel_sigma_px: float = 18.0
    peak_amp: float = 1.0
    pit_amp: float = -1.0
    detail_amp: float = 0.10
    ds_roughness: float = 0.55
    base_level: float = 0.0
    size_px: int = DEFAULT_SIZE
    cell_size_m: float = DEFAULT_CELL_SIZE_M
    h0_m: float = DEFAULT_H0_M

    def __post_init__(self) -> None:
        if self.kernel_sigma_px <= 0:
            raise ValueError("kernel_sigma_px must be positive")
        if self.detail_amp < 0:
            raise ValueError("detail_amp must be non-negative")
        if not 0 <= self.ds_roughness < 1:
            raise ValueError("ds_roughness must lie in [0, 1)")
        if self.size_px < 3:
            raise ValueError("size_px must be at least 3")

    def to_dict(self) -> dict:
        return asdict(self)


def state_seed(base_seed: int, state: State) -> int:
    """Per-state generator seed derived from a base seed and the canonical state digest."""
    text = f"{int(base_seed)}:{state.digest}".encode("ascii")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def _is_ds_size(size: int) -> bool:
    n = size - 1
    return n >= 1 and n & (n - 1) == 0


def diamond_square(size: int, roughness: float, seed: int) -> np.ndarray:
    """Diamond-square midpoint displacement on a ``size x size`` grid, ``size = 2**k + 1``.

    Corners are drawn uniformly from [-1, 1]; every level's displacement
    amplitude is the previous one times ``roughness``. Edge points of the
    diamond step average their two neighbors along the edge, so with zero
    roughness the result is exactly the bilinear interpolant of the corners.
    The result is shifted to zero mean and scaled to unit max-abs.
    """
    if not _is_ds_size(size):
        raise ValueError(f"diamond-square size must be 2**k + 1, got {size}")
    rng = np.random.default_rng(seed)
    g = np.zeros((size, size))
    last = size - 1
    g[0, 0], g[0, last], g[last, 0], g[last, last] = rng.uniform(-1.0, 1.0, 4)

    amp = 1.0
    step = last
    while step > 1:
        half = step // 2
        amp *= roughness
        # square step: cell centers
        centers = 0.25 * (
            g[0:last:step, 0:last:step]
            + g[0:last:step, step::step]
            + g[step::step, 0:last:step]
            + g[step::step, step::step]
        )
        g[half::step, half::step] = centers + amp * rng.uniform(-1.0, 1.0, centers.shape)

        # diamond step, points on rows 0::step (between corners horizontally)
        left = g[0::step, 0:last:step]
        right = g[0::step, step::step]
        avg = 0.5 * (left + right)
        up = np.full_like(avg, np.nan)
        down = np.full_like(avg, np.nan)
        up[1:] = g[half:last:step, half::step]
        down[:-1] = g[half::step, half::step]
        interior = ~np.isnan(up) & ~np.isnan(down)
        avg = np.where(interior, 0.25 * (left + right + np.nan_to_num(up) + np.nan_to_num(down)), avg)
        g[0::step, half::step] = avg + amp * rng.uniform(-1.0, 1.0, avg.shape)

        # diamond step, points on rows half::step (between corners vertically)
        top = g[0:last:step, 0::step]
        bottom = g[step::step, 0::step]
        avg = 0.5 * (top + bottom)
        lft = np.full_like(avg, np.nan)
        rgt = np.full_like(avg, np.nan)
        lft[:, 1:] = g[half::step, half:last:step]
        rgt[:, :-1] = g[half::step, half::step]
        interior = ~np.isnan(lft) & ~np.isnan(rgt)
        avg = np.where(interior, 0.25 * (top + bottom + np.nan_to_num(lft) + np.nan_to_num(rgt)), avg)
        g[half::step, 0::step] = avg + amp * rng.uniform(-1.0, 1.0, avg.shape)

        step = half

    g -= g.mean()
    peak = np.abs(g).max()
    if peak > 0:
        g /= peak
    return g


def _ds_size_for(n: int) -> int:
    size = 2
    while size + 1 < n:
        size *= 2
    return size + 1


def control_field(state: State, cfg: GeneratorConfig) -> np.ndarray:
    """Sum of Gaussian bumps (peaks) and dips (pits) centered on each point's pixel."""
    n = cfg.size_px
    field = np.full((n, n), float(cfg.base_level))
    if not state.points:
        return field
    tri = np.array([p.as_triple() for p in state.points], dtype=np.float64)
    centers_x = PIXELS_PER_CELL * tri[:, 0] + 1
    centers_y = PIXELS_PER_CELL * tri[:, 1] + 1
    amps = np.where(tri[:, 2] > 0, cfg.peak_amp, cfg.pit_amp)
    pix = np.arange(n, dtype=np.float64)
    inv = 1.0 / (2.0 * cfg.kernel_sigma_px**2)
    gy = np.exp(-((pix[None, :] - centers_y[:, None]) ** 2) * inv)
    gx = np.exp(-((pix[None, :] - centers_x[:, None]) ** 2) * inv)
    return field + (gy * amps[:, None]).T @ gx


def normalize_unit(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


def generate(state: State, seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> Heightmap:
    raw = control_field(state, cfg)
    if cfg.detail_amp > 0:
        n = cfg.size_px
        detail = diamond_square(_ds_size_for(n), cfg.ds_roughness, seed)[:n, :n]
        raw = raw + cfg.detail_amp * detail
    unit = blur_grid(normalize_unit(raw))
    return rescale_heights(unit, cfg.h0_m, cfg.cell_size_m)


class ProceduralGenerator:
    generator_id = GENERATOR_ID

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        self.cfg = cfg

    def __call__(self, state: State, seed: int) -> Heightmap:
        return generate(state, seed, self.cfg)


def detect_features(
    h: Heightmap,
    radius_px: int = 9,
    prominence: float = 0.02,
    grid: int | None = None,
) -> list[ControlPoint]:
    """Peaks (strict local maxima) and pits (strict local minima) snapped to grid cells.

    A pixel qualifies when it is strictly above every other pixel of its
    ``(2r+1)^2`` window and exceeds the window mean by ``prominence * h0``.
    Pits are the same test on the inverted field. One point per cell, the
    most prominent one wins.
    """
    grid = grid or h.rows // PIXELS_PER_CELL
    size = 2 * radius_px + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[radius_px, radius_px] = False
    threshold = prominence * h.h0_m
    best: dict[tuple[int, int], tuple[float, PointKind]] = {}
    for kind, values in ((PointKind.PEAK, h.values), (PointKind.PIT, -h.values)):
        neighbor_max = ndimage.maximum_filter(values, footprint=footprint, mode="nearest")
        window_mean = ndimage.uniform_filter(values, size=size, mode="nearest")
        excess = values - window_mean
        hits = (values > neighbor_max) & (excess >= threshold)
        for r, c in zip(*np.nonzero(hits)):
            cell = (min(int(c) // PIXELS_PER_CELL, grid - 1), min(int(r) // PIXELS_PER_CELL, grid - 1))
            prom = float(excess[r, c])
            if cell not in best or prom > best[cell][0]:
                best[cell] = (prom, kind)
    return sorted(ControlPoint(gx, gy, kind) for (gx, gy), (_, kind) in best.items())


def mask_features(points: list, p_mask: float = 0.75, rng: np.random.Generator | int | None = None) -> list:
    """Drop each point independently with probability ``p_mask``."""
    if not 0 <= p_mask <= 1:
        raise ValueError("p_mask must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    keep = rng.random(len(points)) >= p_mask
    return [p for p, k in zip(points, keep) if k]
