"""Depth matrix, sinusoidal depth encoding, and positional encodings.

Depth here is the metric distance from a BEV cell to the ego cell, computed
once per grid and reused as a lookup table. The sinusoidal channel encoding
of that depth is what the fusion blocks multiply into their queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ConfigError, ValidationError

DEFAULT_FREQUENCY_BASE = 10000.0


@dataclass(frozen=True)
class GridSpec:
    """Ego-centric BEV grid: ``width`` x ``height`` cells of ``cell_size`` meters.

    Cell (ix, iy) covers the world rectangle
    [(ix - ego_x) * cell_size, (ix - ego_x + 1) * cell_size) on each axis,
    so the ego cell's lower-left corner sits at the world origin.
    """

    width: int
    height: int
    cell_size: float
    ego_index: tuple[int, int] | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"grid extents must be positive, got {self.width}x{self.height}")
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if self.ego_index is None:
            object.__setattr__(self, "ego_index", (self.width // 2, self.height // 2))
        ex, ey = self.ego_index
        if not (0 <= ex < self.width and 0 <= ey < self.height):
            raise ConfigError(f"ego_index {self.ego_index} outside {self.width}x{self.height} grid")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        ex, ey = self.ego_index
        return ex + int(np.floor(x / self.cell_size)), ey + int(np.floor(y / self.cell_size))

    def contains_cell(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def world_bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((xmin, xmax), (ymin, ymax)) of the grid footprint in meters."""
        ex, ey = self.ego_index
        cs = self.cell_size
        return ((-ex * cs, (self.width - ex) * cs), (-ey * cs, (self.height - ey) * cs))


@dataclass(frozen=True)
class DepthMatrix:
    """Per-cell metric depth; the ego cell is exactly zero."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = self.values
        if v.shape != (self.grid.width, self.grid.height):
            raise ValidationError(f"depth values shape {v.shape} != grid {self.grid.width}x{self.grid.height}")
        if np.any(v < 0):
            raise ValidationError("depth values must be non-negative")
        ex, ey = self.grid.ego_index
        if v[ex, ey] != 0.0:
            raise ValidationError("depth at the ego cell must be zero")


@dataclass(frozen=True)
class DepthEncoding:
    """Sinusoidal channel encoding of a DepthMatrix; values all in [-1, 1]."""

    channels: np.ndarray = field(repr=False)
    frequency_base: float = DEFAULT_FREQUENCY_BASE

    def __post_init__(self):
        if np.any(np.abs(self.channels) > 1.0 + 1e-12):
            raise ValidationError("encoding channels must lie in [-1, 1]")


def build_depth_matrix(grid: GridSpec) -> DepthMatrix:
    """Euclidean cell distance to the ego cell, scaled to meters."""
    ex, ey = grid.ego_index
    dx = np.arange(grid.width, dtype=np.float64) - ex
    dy = np.arange(grid.height, dtype=np.float64) - ey
    values = grid.cell_size * np.hypot(dx[:, None], dy[None, :])
    return DepthMatrix(grid=grid, values=values)


def depth_lookup(m: DepthMatrix, cells) -> np.ndarray:
    """Precomputed depths for (x, y) cell pairs; raises on out-of-grid cells."""
    cells = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    if cells.size == 0:
        return np.zeros(0, dtype=np.float64)
    xs, ys = cells[:, 0], cells[:, 1]
    if np.any(xs < 0) or np.any(xs >= m.grid.width) or np.any(ys < 0) or np.any(ys >= m.grid.height):
        raise BoundsError("depth_lookup: cell outside grid")
    return m.values[xs, ys]


def encode_depths(depths: np.ndarray, channels: int, base: float = DEFAULT_FREQUENCY_BASE) -> np.ndarray:
    """Interleaved sin/cos channels: ch 2i = sin(d / base^(2i/C)), ch 2i+1 = cos.

    Works on any input shape; the channel axis is appended last.
    """
    if channels % 2 != 0 or channels <= 0:
        raise ConfigError(f"channel count must be positive and even, got {channels}")
    if not base > 1:
        raise ConfigError(f"frequency base must exceed 1, got {base}")
    d = np.asarray(depths, dtype=np.float64)
    i = np.arange(channels // 2, dtype=np.float64)
    inv_freq = np.power(base, -2.0 * i / channels)
    phase = d[..., None] * inv_freq
    out = np.empty(d.shape + (channels,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def sinusoidal_encode(m: DepthMatrix, channels: int, base: float = DEFAULT_FREQUENCY_BASE) -> DepthEncoding:
    return DepthEncoding(channels=encode_depths(m.values, channels, base), frequency_base=base)


def instance_depth(m: DepthMatrix, box) -> float:
    """Depth of the BEV cell containing the box center.

    ``box`` is any object with a ``center`` (x, y, z) in meters.
    """
    ix, iy = m.grid.world_to_cell(box.center[0], box.center[1])
    if not m.grid.contains_cell(ix, iy):
        raise BoundsError(f"box center cell {(ix, iy)} outside grid")
    return float(m.values[ix, iy])


def positional_encoding_2d(grid: GridSpec, channels: int, base: float = DEFAULT_FREQUENCY_BASE) -> np.ndarray:
    """W x H x C sinusoidal cell-position encoding; first half x, second half y."""
    if channels % 4 != 0:
        raise ConfigError(f"2D positional encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    ex = encode_depths(np.arange(grid.width, dtype=np.float64), half, base)
    ey = encode_depths(np.arange(grid.height, dtype=np.float64), half, base)
    out = np.empty((grid.width, grid.height, channels), dtype=np.float64)
    out[:, :, :half] = ex[:, None, :]
    out[:, :, half:] = ey[None, :, :]
    return out
