"""Grid geometry: cell indexing, height channels, and pose alignment.

Conventions used throughout the package:

* The grid is axis-aligned with the global frame (the yaw rotation is
  applied to the points, never to the grid) and centered on the sensor.
* Planar cell index ``jx`` counts along global +x (east), ``jy`` along
  global +y (north).  A point at local coordinates ``(x, y)`` falls into
  ``jx = floor(x / d_l + L / 2)`` and symmetrically for ``jy``; cell
  boundaries therefore follow the half-open convention ``[lo, hi)``.
* Height channel 0 collects points below ``h_min`` and the top channel
  collects points at or above ``h_max``; the in-range slab of thickness
  ``d_h`` starting at ``h_min`` is channel 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Snap quotients that are an integer in exact arithmetic back onto that
# integer before floor/ceil.  (3.0 - -1.6) / 0.2 evaluates to
# 22.999999999999996 in IEEE double although the exact value is 23; the
# channel layout must not change because of that last ulp.
_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one bird's-eye-view grid.

    ``length_cells`` counts cells along x, ``width_cells`` along y;
    ``cell_length`` / ``cell_width`` are the matching cell sizes in
    meters.  ``height_min`` / ``height_max`` bound the in-range height
    slab (sensor-relative meters) discretized at ``cell_height``.
    """

    length_cells: int
    width_cells: int
    cell_length: float
    cell_width: float
    height_min: float = -1.6
    height_max: float = 3.0
    cell_height: float = 0.2

    def __post_init__(self) -> None:
        if self.length_cells <= 0 or self.width_cells <= 0:
            raise ValueError("grid must have positive cell counts")
        if min(self.cell_length, self.cell_width, self.cell_height) <= 0:
            raise ValueError("cell sizes must be positive")
        if not self.height_max > self.height_min:
            raise ValueError("height_max must exceed height_min")

    @property
    def height_channels(self) -> int:
        return height_channel_count(self.height_min, self.height_max, self.cell_height)

    def cell_center(self, jx: np.ndarray | int, jy: np.ndarray | int) -> tuple[np.ndarray, np.ndarray]:
        """Local (x, y) of the center of cell (jx, jy)."""
        x = (np.asarray(jx) - self.length_cells / 2 + 0.5) * self.cell_length
        y = (np.asarray(jy) - self.width_cells / 2 + 0.5) * self.cell_width
        return x, y


@dataclass(frozen=True)
class Pose:
    """Global ego pose: position in meters, yaw in radians, time in seconds."""

    timestamp: float
    x: float
    y: float
    yaw: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError("pose fields must be finite")
        # normalize yaw into (-pi, pi]
        yaw = -((-self.yaw + math.pi) % (2 * math.pi) - math.pi)
        object.__setattr__(self, "yaw", yaw)


@dataclass(frozen=True)
class CellIndex:
    """A validated planar cell address within a given grid."""

    jx: int
    jy: int
    spec: GridSpec

    def __post_init__(self) -> None:
        if not (0 <= self.jx < self.spec.length_cells and 0 <= self.jy < self.spec.width_cells):
            raise ValueError(
                f"cell ({self.jx}, {self.jy}) outside grid "
                f"{self.spec.length_cells}x{self.spec.width_cells}"
            )


def height_channel_count(height_min: float, height_max: float, cell_height: float) -> int:
    """Number of height channels: the in-range slabs plus one underflow and
    one overflow channel."""
    if not height_max > height_min:
        raise ValueError("height_max must exceed height_min")
    if cell_height <= 0:
        raise ValueError("cell_height must be positive")
    return math.ceil((height_max - height_min) / cell_height - _SNAP) + 2


def to_global(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Rotate vehicle-frame points into the global orientation.

    Rotation only: the translation stays with the pose so cell indexing can
    remain sensor-centered, and z passes through untouched.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    out[:, 2] = pts[:, 2]
    return out


def plane_index(x: float, y: float, spec: GridSpec) -> tuple[int, int] | None:
    """Planar cell of a single point, or None when it falls off the grid."""
    jx = math.floor(x / spec.cell_length + spec.length_cells / 2)
    jy = math.floor(y / spec.cell_width + spec.width_cells / 2)
    if 0 <= jx < spec.length_cells and 0 <= jy < spec.width_cells:
        return jx, jy
    return None


def plane_indices(x: np.ndarray, y: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized planar indexing.

    Returns ``(jx, jy, in_bounds)``; indices of out-of-bounds points are
    whatever the floor arithmetic produced and must be gated by the mask.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    jx = np.floor(x / spec.cell_length + spec.length_cells / 2).astype(np.int64)
    jy = np.floor(y / spec.cell_width + spec.width_cells / 2).astype(np.int64)
    inb = (jx >= 0) & (jx < spec.length_cells) & (jy >= 0) & (jy < spec.width_cells)
    return jx, jy, inb


def height_index(z: float, spec: GridSpec) -> int:
    """Height channel of a single point (always valid; out-of-range points
    land in the underflow/overflow channels)."""
    q = (z - spec.height_min) / spec.cell_height
    j = math.floor(q + _SNAP) + 1
    top = spec.height_channels - 1
    return min(max(j, 0), top)


def height_indices(z: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Vectorized height channel lookup."""
    z = np.asarray(z, dtype=np.float64)
    q = (z - spec.height_min) / spec.cell_height
    j = np.floor(q + _SNAP).astype(np.int64) + 1
    return np.clip(j, 0, spec.height_channels - 1)


# Full-scale default: 150 m x 150 m at 15 cm, 25 height channels.
FULL_SCALE_GRID = GridSpec(
    length_cells=1001,
    width_cells=1001,
    cell_length=0.15,
    cell_width=0.15,
    height_min=-1.6,
    height_max=3.0,
    cell_height=0.2,
)

# The desk default used by tests and demos: 12 m x 12 m, same vertical slab.
DESK_GRID = GridSpec(
    length_cells=80,
    width_cells=80,
    cell_length=0.15,
    cell_width=0.15,
    height_min=-1.6,
    height_max=3.0,
    cell_height=0.2,
)
