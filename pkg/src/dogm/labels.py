"""Ground-truth label grids: occupancy, velocity, dynamics, semantics,
driveable area, ground classification, plus ROI and observability masks.

All grids live on the core L×W layout in the rotation-aligned ego frame.
Velocities are stored as east/north components in the global frame — the
grid axes stay world-aligned, so the two frames agree.  Boxes are given in
world coordinates and rasterized by cell-center containment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import ism
from .grid import GridSpec, Pose, plane_indices, to_global

# semantic class ids
STA = 0
V_DYN, LV_DYN, PED_DYN, TW_DYN = 1, 2, 3, 4
V_STATIC, LV_STATIC, PED_STATIC, TW_STATIC = 5, 6, 7, 8
SEMANTIC_CLASS_COUNT = 9
IGNORE = 255

# ground classification ids
BACKGROUND = 0
GROUND = 1
NO_GROUND = 2

DYNAMIC_SPEED = 0.8  # m/s, strict threshold
ROI_MARGIN = 5.0  # meters beyond the driveable area

_COARSE = {
    "VEHICLE": "V",
    "LARGE_VEHICLE": "LV",
    "SCHOOL_BUS": "LV",
    "EMERGENCY_VEHICLE": "LV",
    "TRAILER": "LV",
    "PEDESTRIAN": "PED",
    "STROLLER": "PED",
    "ANIMAL": "PED",
    "WHEELCHAIR": "PED",
    "BICYCLE": "TW",
    "BICYCLIST": "TW",
    "MOPED": "TW",
    "MOTORCYCLE": "TW",
    "MOTORCYCLIST": "TW",
    "ON_ROAD_OBSTACLE": "STA",
    "OTHER_MOVER": "STA",
}
_CLASS_BASE = {"V": V_DYN, "LV": LV_DYN, "PED": PED_DYN, "TW": TW_DYN}


def map_class(raw: str) -> str:
    """Coarse class for a raw label; unknown strings sink to STA."""
    return _COARSE.get(raw.strip().upper().replace(" ", "_"), "STA")


def semantic_id(coarse: str, dynamic: bool) -> int:
    if coarse == "STA":
        return STA
    base = _CLASS_BASE[coarse]
    return base if dynamic else base + 4


@dataclass(frozen=True)
class Box:
    """Oriented object footprint in the world frame."""

    id: int
    raw_class: str
    cx: float
    cy: float
    yaw: float
    length: float
    width: float


@dataclass
class DriveableMap:
    """Binary driveable-area raster; ``data[i, j]`` covers the square
    ``[origin_x + i·res, origin_x + (i+1)·res) × [origin_y + j·res, ...)``."""

    data: np.ndarray  # (nx, ny) bool
    resolution: float
    origin: tuple[float, float]

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 2:
            raise ValueError("raster must be two-dimensional")
        if self.resolution <= 0:
            raise ValueError("raster resolution must be positive")


@dataclass
class LabelSet:
    occ: np.ndarray  # (L, W) float in {0, 0.5, 1}
    vel: np.ndarray  # (L, W, 2) float, east/north m/s
    dyn: np.ndarray  # (L, W) uint8
    sem: np.ndarray  # (L, W) uint8, ids 0..8 or IGNORE
    road: np.ndarray  # (L, W) uint8
    gc: np.ndarray  # (L, W) uint8
    roi: np.ndarray  # (L, W) uint8
    observable: np.ndarray  # (L, W) uint8


def boxes_from_scene(scene, frame: int) -> list[Box]:
    """World-frame boxes for one frame of a simulated scene."""
    out = []
    for obj in scene.objects:
        cx, cy, yaw = obj.trajectory[frame]
        out.append(Box(obj.id, obj.raw_class, cx, cy, yaw, obj.length, obj.width))
    return out


def _cell_centers(pose: Pose, spec: GridSpec):
    """World coordinates of every cell center, as broadcastable (L,1)/(1,W)."""
    jx = np.arange(spec.length_cells, dtype=np.float64)
    jy = np.arange(spec.width_cells, dtype=np.float64)
    x = (jx - spec.length_cells / 2 + 0.5) * spec.cell_length + pose.x
    y = (jy - spec.width_cells / 2 + 0.5) * spec.cell_width + pose.y
    return x[:, None], y[None, :]


def box_footprint(box: Box, pose: Pose, spec: GridSpec) -> np.ndarray:
    """Boolean mask of cells whose center lies inside the box (boundary
    inclusive)."""
    x, y = _cell_centers(pose, spec)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rx, ry = x - box.cx, y - box.cy
    u = c * rx + s * ry
    v = -s * rx + c * ry
    return (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2)


def augment_occupancy(
    meas: ism.MeasurementGrid, boxes: list[Box], pose: Pose
) -> np.ndarray:
    """Probability view of the measurement grid with every cell inside a
    labeled box forced to occupied."""
    occ = meas.probabilities()
    for box in boxes:
        occ[box_footprint(box, pose, meas.spec)] = 1.0
    return occ


def box_velocities(
    boxes: list[Box], prev_boxes: list[Box], dt: float
) -> tuple[dict[int, tuple[float, float]], tuple[int, ...]]:
    """Backward-difference world-frame velocity per box id.

    Boxes without a predecessor get (0, 0) and are reported as unmatched.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    prev = {b.id: b for b in prev_boxes}
    vels: dict[int, tuple[float, float]] = {}
    unmatched = []
    for box in boxes:
        before = prev.get(box.id)
        if before is None:
            vels[box.id] = (0.0, 0.0)
            unmatched.append(box.id)
        else:
            vels[box.id] = ((box.cx - before.cx) / dt, (box.cy - before.cy) / dt)
    return vels, tuple(unmatched)


def velocity_and_dynamic(
    boxes: list[Box],
    prev_boxes: list[Box],
    dt: float,
    pose: Pose,
    spec: GridSpec,
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Velocity and dynamic-mask grids; each footprint carries its box's
    rigid velocity (later boxes win where footprints overlap)."""
    vel = np.zeros((spec.length_cells, spec.width_cells, 2))
    vels, unmatched = box_velocities(boxes, prev_boxes, dt)
    for box in boxes:
        vel[box_footprint(box, pose, spec)] = vels[box.id]
    dyn = (np.hypot(vel[..., 0], vel[..., 1]) > DYNAMIC_SPEED).astype(np.uint8)
    return vel, dyn, unmatched


def semantic_labels(
    occ: np.ndarray,
    boxes: list[Box],
    box_speeds: dict[int, float],
    pose: Pose,
    spec: GridSpec,
) -> np.ndarray:
    """Class-id grid: occupied cells get their covering box's class (split
    dynamic/static by the box speed), bare occupied cells STA, the rest
    IGNORE."""
    sem = np.full((spec.length_cells, spec.width_cells), IGNORE, dtype=np.uint8)
    occupied = occ == 1.0
    sem[occupied] = STA
    for box in boxes:
        coarse = map_class(box.raw_class)
        cid = semantic_id(coarse, box_speeds[box.id] > DYNAMIC_SPEED)
        sem[box_footprint(box, pose, spec) & occupied] = cid
    return sem


def rasterize_polygon(
    polygon: np.ndarray, resolution: float, margin: float = ROI_MARGIN
) -> DriveableMap:
    """Raster whose pixels are set where the pixel center lies inside the
    polygon (even-odd rule); the raster extends ``margin`` beyond the
    polygon's bounding box on every side."""
    v = np.asarray(polygon, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise ValueError("polygon must be (K, 2) with K >= 3 vertices")
    if not np.isfinite(v).all():
        raise ValueError("polygon vertices must be finite")
    if resolution <= 0:
        raise ValueError("raster resolution must be positive")
    lo = v.min(axis=0) - margin
    hi = v.max(axis=0) + margin
    nx = max(1, math.ceil((hi[0] - lo[0]) / resolution))
    ny = max(1, math.ceil((hi[1] - lo[1]) / resolution))
    px = lo[0] + (np.arange(nx, dtype=np.float64)[:, None] + 0.5) * resolution
    py = lo[1] + (np.arange(ny, dtype=np.float64)[None, :] + 0.5) * resolution
    inside = np.zeros((nx, ny), dtype=bool)
    for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        crossing = px < x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & crossing
    return DriveableMap(inside, resolution, (float(lo[0]), float(lo[1])))


def road_roi_labels(
    driveable: DriveableMap, pose: Pose, spec: GridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Driveable-area resample plus the region of interest around it.

    The road grid samples the raster pixel containing each cell center;
    the ROI dilates it by a Euclidean disk of ceil(5 m / cell) cells.
    """
    x, y = _cell_centers(pose, spec)
    ix = np.floor((x - driveable.origin[0]) / driveable.resolution).astype(np.int64)
    iy = np.floor((y - driveable.origin[1]) / driveable.resolution).astype(np.int64)
    nx, ny = driveable.data.shape
    cover = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    cover = np.broadcast_to(cover, (spec.length_cells, spec.width_cells))
    if not cover.all():
        warnings.warn("driveable raster does not cover the grid; uncovered cells get road=0")
    road = np.zeros((spec.length_cells, spec.width_cells), dtype=np.uint8)
    ixb = np.clip(np.broadcast_to(ix, road.shape), 0, nx - 1)
    iyb = np.clip(np.broadcast_to(iy, road.shape), 0, ny - 1)
    road[cover] = driveable.data[ixb[cover], iyb[cover]]

    radius = math.ceil(ROI_MARGIN / spec.cell_length)
    if road.any():
        dist = distance_transform_edt(road == 0)
        roi = (dist <= radius).astype(np.uint8)
    else:
        roi = np.zeros_like(road)
    return road, roi


def ground_class_labels(cloud, pose: Pose, spec: GridSpec) -> np.ndarray:
    """BACKGROUND / GROUND / NO_GROUND per cell; any non-ground return wins
    over ground returns in the same cell."""
    gc = np.full((spec.length_cells, spec.width_cells), BACKGROUND, dtype=np.uint8)
    if len(cloud.xyz) == 0:
        return gc
    pts = to_global(cloud.xyz, pose)
    jx, jy, inb = plane_indices(pts[:, 0], pts[:, 1], spec)
    g = np.asarray(cloud.ground, dtype=bool)
    gc[jx[inb & g], jy[inb & g]] = GROUND
    gc[jx[inb & ~g], jy[inb & ~g]] = NO_GROUND
    return gc


def observability_mask(meas: ism.MeasurementGrid) -> np.ndarray:
    return (meas.states != ism.UNKNOWN).astype(np.uint8)


def validate_labels(
    labels: LabelSet, boxes: list[Box] = (), pose: Pose | None = None,
    spec: GridSpec | None = None,
) -> None:
    """Raise if any cross-grid labeling rule is violated."""
    occ, vel, dyn, sem = labels.occ, labels.vel, labels.dyn, labels.sem
    if not np.isin(occ, (0.0, 0.5, 1.0)).all():
        raise ValueError("occ values must be 0, 0.5 or 1")
    speed = np.hypot(vel[..., 0], vel[..., 1])
    moving = dyn == 1
    if not (occ[moving] == 1.0).all():
        raise ValueError("dynamic cells must be occupied")
    if not (speed[moving] > DYNAMIC_SPEED).all():
        raise ValueError("dynamic cells must exceed the speed threshold")
    if ((sem != IGNORE) != (occ == 1.0)).any():
        raise ValueError("semantic ids must be present exactly on occupied cells")
    valid_ids = np.isin(sem, list(range(SEMANTIC_CLASS_COUNT)) + [IGNORE])
    if not valid_ids.all():
        raise ValueError("semantic ids out of range")
    for name in ("dyn", "road", "roi", "observable"):
        grid = getattr(labels, name)
        if not np.isin(grid, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
    if not np.isin(labels.gc, (BACKGROUND, GROUND, NO_GROUND)).all():
        raise ValueError("gc ids out of range")
    if pose is not None and spec is not None:
        for box in boxes:
            inside = box_footprint(box, pose, spec)
            if not (occ[inside] == 1.0).all():
                raise ValueError(f"box {box.id} footprint contains non-occupied cells")


def label_frame(
    cloud,
    boxes: list[Box],
    prev_boxes: list[Box],
    pose: Pose,
    driveable: DriveableMap,
    spec: GridSpec,
    dt: float,
) -> LabelSet:
    """Assemble every label grid for one frame and validate the result."""
    meas = ism.measurement_grid(cloud, pose, spec)
    occ = augment_occupancy(meas, boxes, pose)
    vel, dyn, _ = velocity_and_dynamic(boxes, prev_boxes, dt, pose, spec)
    speeds = {
        bid: math.hypot(*v) for bid, v in box_velocities(boxes, prev_boxes, dt)[0].items()
    }
    sem = semantic_labels(occ, boxes, speeds, pose, spec)
    road, roi = road_roi_labels(driveable, pose, spec)
    gc = ground_class_labels(cloud, pose, spec)
    labels = LabelSet(
        occ=occ,
        vel=vel,
        dyn=dyn,
        sem=sem,
        road=road,
        gc=gc,
        roi=roi,
        observable=observability_mask(meas),
    )
    validate_labels(labels, boxes, pose, spec)
    return labels
