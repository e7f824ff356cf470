"""Bird's-eye-view voxelization of lidar sweeps.

A sweep becomes a binary tensor over a padded frame: the core
``L x W x H`` grid (sensor-centered, globally oriented) is written into a
``(L+28) x (W+28) x H`` tensor at a placement offset.  The padding plus
offset implement input placement: the network's recurrent state lives in a
quasi-static frame that follows the ego vehicle in 27-cell increments, and
the residual displacement below one such increment is absorbed by sliding
the core inside the padded frame (centered placement is ``(14, 14)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Pose, height_indices, plane_indices, to_global

PAD = 28
CENTER_OFFSET = 14


@dataclass
class BevTensor:
    """Binary occupancy tensor over the padded frame.

    ``data[jx + ox, jy + oy, jz] == 1`` iff some point fell in core cell
    ``(jx, jy)`` at height channel ``jz``.
    """

    data: np.ndarray
    offset: tuple[int, int]
    spec: GridSpec

    def __post_init__(self) -> None:
        L, W = self.spec.length_cells, self.spec.width_cells
        expected = (L + PAD, W + PAD, self.spec.height_channels)
        if self.data.shape != expected:
            raise ValueError(f"padded tensor must have shape {expected}, got {self.data.shape}")
        ox, oy = self.offset
        if not (0 <= ox <= PAD and 0 <= oy <= PAD):
            raise ValueError(f"placement offset {self.offset} outside [0, {PAD}]")

    @property
    def core(self) -> np.ndarray:
        """View of the core L x W x H block."""
        ox, oy = self.offset
        L, W = self.spec.length_cells, self.spec.width_cells
        return self.data[ox : ox + L, oy : oy + W]


def encode_core(points: np.ndarray, pose: Pose, spec: GridSpec) -> np.ndarray:
    """Cell indices hit by a sweep: an (M, 3) int array of (jx, jy, jz).

    Points are rotated into the global orientation, planar-indexed around
    the sensor, and out-of-bounds planar points dropped; height always
    resolves (out-of-range z lands in the underflow/overflow channels).
    Duplicates are kept; the caller decides whether to deduplicate.
    """
    pts = to_global(points, pose)
    jx, jy, inb = plane_indices(pts[:, 0], pts[:, 1], spec)
    jz = height_indices(pts[:, 2], spec)
    return np.stack([jx[inb], jy[inb], jz[inb]], axis=1)


def place_core_indices(idx: np.ndarray, offset: tuple[int, int], spec: GridSpec) -> BevTensor:
    """Write core cell indices as ones into a zeroed padded tensor."""
    ox, oy = offset
    L, W = spec.length_cells, spec.width_cells
    data = np.zeros((L + PAD, W + PAD, spec.height_channels), dtype=np.uint8)
    if len(idx):
        data[idx[:, 0] + ox, idx[:, 1] + oy, idx[:, 2]] = 1
    return BevTensor(data=data, offset=(ox, oy), spec=spec)


def encode_bev(
    points: np.ndarray,
    pose: Pose,
    spec: GridSpec,
    offset: tuple[int, int] = (CENTER_OFFSET, CENTER_OFFSET),
) -> BevTensor:
    """Voxelize one sweep into a placed binary BEV tensor."""
    return place_core_indices(encode_core(points, pose, spec), offset, spec)
