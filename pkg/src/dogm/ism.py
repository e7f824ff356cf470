"""Geometric inverse sensor model: ground removal plus free-space ray casting.

The classical baseline builds a measurement grid per sweep: obstacle points
mark their cells OCCUPIED, and every cell strictly between the sensor cell
and an occupied cell is marked FREE by integer line traversal.  Everything
else stays UNKNOWN.  OCCUPIED always beats FREE.

The traversal is a supercover: every cell whose interior the exact segment
passes through is visited, and when the segment crosses a cell corner
exactly, both side cells adjacent to the corner are marked as well.  It is
implemented on crossing parameters: along a ray from cell center to cell
center the x-boundary crossings sit at ``s = (i + 0.5) / |dx|`` and the
y-crossings at ``(j + 0.5) / |dy|``; sorting the merged crossings and
taking interval midpoints enumerates the visited cells, and coincident
crossing pairs are the corner hits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Pose, plane_indices, to_global

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

_PROBABILITY = np.array([0.5, 0.0, 1.0])
_TIE_TOL = 1e-12
_TIE_EPS = 1e-7


@dataclass
class MeasurementGrid:
    """Per-sweep classical occupancy evidence over the core grid."""

    states: np.ndarray  # (L, W) uint8 of UNKNOWN / FREE / OCCUPIED
    spec: GridSpec

    def probabilities(self) -> np.ndarray:
        """Occupancy probability view: UNKNOWN 0.5, FREE 0.0, OCCUPIED 1.0."""
        return _PROBABILITY[self.states]

    def observable(self) -> np.ndarray:
        """Cells carrying any evidence this sweep (state not UNKNOWN)."""
        return self.states != UNKNOWN


def remove_ground(xyz: np.ndarray, is_ground: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a sweep into obstacle and ground returns using the flags."""
    is_ground = np.asarray(is_ground, dtype=bool)
    if len(is_ground) != len(xyz):
        raise ValueError("flag count must match point count")
    return xyz[~is_ground], xyz[is_ground]


def supercover_free_cells(
    targets: np.ndarray, center: tuple[int, int], spec: GridSpec
) -> np.ndarray:
    """Boolean (L, W) mask of cells strictly between the center cell and any
    target cell under the supercover traversal (endpoint cells excluded)."""
    L, W = spec.length_cells, spec.width_cells
    free = np.zeros((L, W), dtype=bool)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    if len(targets) == 0:
        return free
    cx, cy = center
    d = targets - np.array([cx, cy])
    mx, my = np.abs(d[:, 0]), np.abs(d[:, 1])
    mmax = int(max(mx.max(initial=0), my.max(initial=0)))
    if mmax == 0:
        return free

    col = np.arange(mmax, dtype=np.float64)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(col < mx[:, None], (col + 0.5) / mx[:, None], np.inf)
        sy = np.where(col < my[:, None], (col + 0.5) / my[:, None], np.inf)
        merged = np.concatenate([sx, sy, np.ones((len(targets), 1))], axis=1)
        merged.sort(axis=1)

        lo = np.concatenate([np.zeros((len(targets), 1)), merged[:, :-1]], axis=1)
        mids = 0.5 * (lo + merged)
        valid = np.isfinite(mids)
        ray = np.broadcast_to(np.arange(len(targets))[:, None], mids.shape)[valid]
        m = mids[valid]
        jx = np.floor(cx + 0.5 + m * d[ray, 0]).astype(np.int64)
        jy = np.floor(cy + 0.5 + m * d[ray, 1]).astype(np.int64)

        # coincident x/y crossings: the segment passes through a corner;
        # mark both side cells adjacent to it
        tie = (
            (np.diff(merged, axis=1) < _TIE_TOL)
            & np.isfinite(merged[:, :-1])
            & (merged[:, :-1] < 1.0)
        )
    if tie.any():
        ray_i, _ = np.nonzero(tie)
        s = merged[:, :-1][tie]
        dx = d[ray_i, 0]
        dy = d[ray_i, 1]
        ax = np.floor(cx + 0.5 + (s + _TIE_EPS) * dx).astype(np.int64)
        ay = np.floor(cy + 0.5 + (s - _TIE_EPS) * dy).astype(np.int64)
        bx = np.floor(cx + 0.5 + (s - _TIE_EPS) * dx).astype(np.int64)
        by = np.floor(cy + 0.5 + (s + _TIE_EPS) * dy).astype(np.int64)
        jx = np.concatenate([jx, ax, bx])
        jy = np.concatenate([jy, ay, by])
        ray = np.concatenate([ray, ray_i, ray_i])

    # strictly between: drop each ray's own endpoint cells
    keep = (
        (jx >= 0)
        & (jx < L)
        & (jy >= 0)
        & (jy < W)
        & ((jx != targets[ray, 0]) | (jy != targets[ray, 1]))
    )
    free[jx[keep], jy[keep]] = True
    free[cx, cy] = False
    return free


def raycast_measurement(occupied_cells: np.ndarray, spec: GridSpec) -> MeasurementGrid:
    """Measurement grid from occupied cell indices; rays fan out from the
    grid center cell."""
    L, W = spec.length_cells, spec.width_cells
    states = np.zeros((L, W), dtype=np.uint8)
    occupied_cells = np.asarray(occupied_cells, dtype=np.int64).reshape(-1, 2)
    if len(occupied_cells) == 0:
        return MeasurementGrid(states=states, spec=spec)
    uniq = np.unique(occupied_cells, axis=0)
    center = (L // 2, W // 2)
    free = supercover_free_cells(uniq, center, spec)
    states[free] = FREE
    states[uniq[:, 0], uniq[:, 1]] = OCCUPIED
    return MeasurementGrid(states=states, spec=spec)


def measurement_grid(cloud, pose: Pose, spec: GridSpec) -> MeasurementGrid:
    """Full classical pipeline: ground removal, projection, ray casting.

    ``cloud`` is anything with ``.xyz`` (N, 3) and ``.ground`` (N,) bool.
    """
    obstacles, _ = remove_ground(cloud.xyz, cloud.ground)
    pts = to_global(obstacles, pose)
    jx, jy, inb = plane_indices(pts[:, 0], pts[:, 1], spec)
    cells = np.stack([jx[inb], jy[inb]], axis=1)
    return raycast_measurement(cells, spec)
