"""Desk-scale dynamic occupancy grid mapping.

Raw lidar sweeps are voxelized into a bird's-eye-view tensor, aligned to a
quasi-static frame that follows the ego vehicle in coarse-cell increments,
and fed to a recurrent multi-task network that predicts occupancy, cell-wise
velocity, a dynamic/static mask, semantics, driveable area, and a ground
classification.  A classical ground-removal + ray-casting inverse sensor
model is included as the measurement-grid baseline, together with a
synthetic lidar scene generator, a reverse-mode autodiff engine the model
trains on, and evaluation/rendering utilities.
"""

from .grid import GridSpec, Pose, CellIndex, height_channel_count, plane_index, plane_indices, height_index, height_indices, to_global

__all__ = [
    "GridSpec",
    "Pose",
    "CellIndex",
    "height_channel_count",
    "plane_index",
    "plane_indices",
    "height_index",
    "height_indices",
    "to_global",
]
