"""Synthetic scene generation and lidar simulation.

The world is 2.5D: a flat ground plane, upright rectangular objects that
follow constant-velocity or constant-turn trajectories, and static wall
segments, all extruded vertically from the ground.  A spinning multi-ring
sensor is simulated exactly — per ray, the first surface whose height span
contains the beam at the crossing distance wins; rays that reach the ground
plane first produce returns flagged ``is_ground``.

Frames are reproducible in isolation: scene layout derives from the scene
seed, and range jitter (when enabled) from a counter-based generator keyed
by (jitter seed, frame index).

Coordinates: the vehicle frame has its origin on the ground directly below
the sensor, x forward, y left, z up; ground returns therefore sit at z = 0
and the sensor at z = ``SensorConfig.height``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Pose

VEHICLE_CLASSES = ("VEHICLE",)
LARGE_VEHICLE_CLASSES = ("LARGE_VEHICLE", "SCHOOL_BUS", "TRAILER")
PEDESTRIAN_CLASSES = ("PEDESTRIAN",)
TWO_WHEELER_CLASSES = ("BICYCLIST", "MOTORCYCLIST")


@dataclass
class PointCloud:
    """One sweep in the vehicle frame; ``ground[i]`` marks returns whose ray
    terminated on the ground plane."""

    timestamp: float
    xyz: np.ndarray  # (N, 3) float64
    ground: np.ndarray  # (N,) bool

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.ground = np.asarray(self.ground, dtype=bool).reshape(-1)
        if len(self.xyz) != len(self.ground):
            raise ValueError("ground flag count must match point count")
        if not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")


@dataclass(frozen=True)
class Wall:
    x1: float
    y1: float
    x2: float
    y2: float
    height: float


@dataclass
class SceneObject:
    """Extruded rectangle following a per-frame (cx, cy, yaw) trajectory."""

    id: int
    raw_class: str
    length: float
    width: float
    height: float
    trajectory: np.ndarray  # (frames, 3) of cx, cy, yaw

    def __post_init__(self) -> None:
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("object dimensions must be positive")
        self.trajectory = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)

    def corners(self, frame: int) -> np.ndarray:
        """Footprint corners (4, 2) in the world frame, counter-clockwise."""
        cx, cy, yaw = self.trajectory[frame]
        c, s = math.cos(yaw), math.sin(yaw)
        half = np.array(
            [
                [self.length / 2, self.width / 2],
                [-self.length / 2, self.width / 2],
                [-self.length / 2, -self.width / 2],
                [self.length / 2, -self.width / 2],
            ]
        )
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([cx, cy])


@dataclass
class SceneSequence:
    frames: int
    dt: float
    ego_trajectory: list[Pose]
    objects: list[SceneObject]
    static_walls: list[Wall]
    driveable_polygon: np.ndarray  # (K, 2) counter-clockwise
    ground_height: float = 0.0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.ego_trajectory) != self.frames:
            raise ValueError("ego trajectory length must equal frame count")
        self.driveable_polygon = np.asarray(self.driveable_polygon, dtype=np.float64)
        if polygon_area(self.driveable_polygon) <= 0:
            raise ValueError("driveable polygon must have positive area")
        for obj in self.objects:
            if len(obj.trajectory) != self.frames:
                raise ValueError(
                    f"object {obj.id} trajectory length != frame count"
                )


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class SensorConfig:
    """Spinning-sensor beam layout plus optional Gaussian range jitter."""

    rings: int = 32
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    azimuth_step_deg: float = 0.4
    max_range: float = 120.0
    height: float = 1.8
    range_jitter: float = 0.0
    jitter_seed: int = 0

    def elevations(self) -> np.ndarray:
        return np.deg2rad(
            np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.rings)
        )

    def azimuths(self) -> np.ndarray:
        return np.deg2rad(np.arange(0.0, 360.0, self.azimuth_step_deg))


# A coarser sensor tilted further down, so ground returns fall inside a
# dozen-meter grid (the default beams first touch ground at ~6.7 m).
DESK_SENSOR = SensorConfig(
    rings=24,
    elevation_min_deg=-30.0,
    elevation_max_deg=10.0,
    azimuth_step_deg=0.5,
    max_range=40.0,
)


@dataclass(frozen=True)
class CategoryConfig:
    """How many objects of one category to spawn and how they move."""

    count: int = 0
    static_count: int = 0
    speed_range: tuple[float, float] = (1.0, 2.0)


@dataclass(frozen=True)
class SceneConfig:
    frames: int = 30
    dt: float = 0.1
    vehicles: CategoryConfig = field(
        default_factory=lambda: CategoryConfig(2, 1, (1.2, 2.5))
    )
    large_vehicles: CategoryConfig = field(default_factory=CategoryConfig)
    pedestrians: CategoryConfig = field(
        default_factory=lambda: CategoryConfig(2, 1, (0.9, 1.4))
    )
    two_wheelers: CategoryConfig = field(default_factory=CategoryConfig)
    walls: int = 4
    arena_half_extent: float = 5.5
    ego_speed: float = 0.0
    ego_turn_rate: float = 0.0
    ground_height: float = 0.0
    turn_fraction: float = 0.3


def _propagate(start, heading, speed, omega, frames, dt) -> np.ndarray:
    """Exact constant-velocity / constant-turn trajectory, (frames, 3)."""
    t = np.arange(frames) * dt
    x0, y0 = start
    if abs(omega) < 1e-12:
        x = x0 + speed * math.cos(heading) * t
        y = y0 + speed * math.sin(heading) * t
        yaw = np.full(frames, heading)
    else:
        r = speed / omega
        yaw = heading + omega * t
        x = x0 + r * (np.sin(yaw) - math.sin(heading))
        y = y0 - r * (np.cos(yaw) - math.cos(heading))
    return np.stack([x, y, yaw], axis=1)


_CATEGORY_DIMS = {
    # (length range, width range, height range) in meters
    "vehicle": ((3.8, 4.8), (1.6, 2.0), (1.4, 1.8)),
    "large_vehicle": ((6.0, 8.0), (2.3, 2.8), (2.6, 3.4)),
    "pedestrian": ((0.5, 0.7), (0.5, 0.7), (1.6, 1.9)),
    "two_wheeler": ((1.6, 2.2), (0.6, 0.8), (1.2, 1.7)),
}
_CATEGORY_CLASSES = {
    "vehicle": VEHICLE_CLASSES,
    "large_vehicle": LARGE_VEHICLE_CLASSES,
    "pedestrian": PEDESTRIAN_CLASSES,
    "two_wheeler": TWO_WHEELER_CLASSES,
}


def _validate_config(config: SceneConfig) -> None:
    if config.frames < 1 or config.dt <= 0:
        raise ValueError("frames must be >= 1 and dt positive")
    if config.arena_half_extent <= 0:
        raise ValueError("arena half extent must be positive")
    if config.walls < 0:
        raise ValueError("wall count must be non-negative")
    for name in ("vehicles", "large_vehicles", "pedestrians", "two_wheelers"):
        cat: CategoryConfig = getattr(config, name)
        lo, hi = cat.speed_range
        if cat.count < 0 or not 0 <= cat.static_count <= cat.count:
            raise ValueError(f"bad counts for {name}")
        if lo < 0 or hi < lo:
            raise ValueError(f"bad speed range for {name}")


def generate_scene(config: SceneConfig, seed: int) -> SceneSequence:
    """Deterministic scene layout for a given (config, seed)."""
    _validate_config(config)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    a = config.arena_half_extent
    duration = (config.frames - 1) * config.dt

    ego = []
    ego_traj = _propagate((0.0, 0.0), 0.0, config.ego_speed, config.ego_turn_rate,
                          config.frames, config.dt)
    for k in range(config.frames):
        x, y, yaw = ego_traj[k]
        ego.append(Pose(timestamp=k * config.dt, x=x, y=y, yaw=yaw))

    objects: list[SceneObject] = []
    next_id = 1
    for name in ("vehicle", "large_vehicle", "pedestrian", "two_wheeler"):
        cat: CategoryConfig = getattr(config, name + "s")
        (llo, lhi), (wlo, whi), (hlo, hhi) = _CATEGORY_DIMS[name]
        classes = _CATEGORY_CLASSES[name]
        for i in range(cat.count):
            static = i < cat.static_count
            speed = 0.0 if static else rng.uniform(*cat.speed_range)
            length = rng.uniform(llo, lhi)
            width = rng.uniform(wlo, whi)
            height = rng.uniform(hlo, hhi)
            raw = classes[int(rng.integers(len(classes)))]
            traj = None
            for _ in range(40):
                start = rng.uniform(-a * 0.75, a * 0.75, size=2)
                if math.hypot(*start) < 1.5:
                    continue  # keep spawns off the sensor
                heading = rng.uniform(-math.pi, math.pi)
                omega = 0.0
                if not static and rng.uniform() < config.turn_fraction:
                    omega = rng.uniform(0.2, 0.6) * (1 if rng.uniform() < 0.5 else -1)
                cand = _propagate(start, heading, speed, omega, config.frames, config.dt)
                if np.abs(cand[:, :2]).max() <= a - 0.3:
                    traj = cand
                    break
            if traj is None:
                # fall back to a speed that provably fits the arena
                start = rng.uniform(-a * 0.5, a * 0.5, size=2)
                heading = rng.uniform(-math.pi, math.pi)
                fit = max(0.0, (a - 0.3 - float(np.abs(start).max())) / max(duration, 1e-9))
                traj = _propagate(start, heading, min(speed, fit), 0.0,
                                  config.frames, config.dt)
            objects.append(SceneObject(next_id, raw, length, width, height, traj))
            next_id += 1

    walls = []
    for _ in range(config.walls):
        # tangential segments in the ring just outside the driveable square
        angle = rng.uniform(-math.pi, math.pi)
        radius = a + rng.uniform(0.15, 0.6)
        cx, cy = radius * math.cos(angle), radius * math.sin(angle)
        half = rng.uniform(1.0, 2.5)
        tx, ty = -math.sin(angle), math.cos(angle)
        walls.append(
            Wall(cx - half * tx, cy - half * ty, cx + half * tx, cy + half * ty,
                 height=rng.uniform(1.5, 2.5))
        )

    polygon = np.array([[-a, -a], [a, -a], [a, a], [-a, a]])
    return SceneSequence(
        frames=config.frames,
        dt=config.dt,
        ego_trajectory=ego,
        objects=objects,
        static_walls=walls,
        driveable_polygon=polygon,
        ground_height=config.ground_height,
    )


def _frame_segments(scene: SceneSequence, frame: int):
    """All upright surfaces for one frame: (p1, p2, height) arrays in the
    world frame."""
    p1, p2, height = [], [], []
    for obj in scene.objects:
        c = obj.corners(frame)
        for k in range(4):
            p1.append(c[k])
            p2.append(c[(k + 1) % 4])
            height.append(obj.height)
    for w in scene.static_walls:
        p1.append((w.x1, w.y1))
        p2.append((w.x2, w.y2))
        height.append(w.height)
    if not p1:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    return np.asarray(p1, float), np.asarray(p2, float), np.asarray(height, float)


def simulate_lidar(scene: SceneSequence, frame: int, sensor: SensorConfig) -> PointCloud:
    """Cast the sensor's ray fan from the ego pose of ``frame``.

    Returns points in the vehicle frame.  Each ray keeps its first surface
    crossing whose height span contains the beam; failing that it returns a
    ground point where the beam meets the ground plane, or nothing.
    """
    if not 0 <= frame < scene.frames:
        raise IndexError(f"frame {frame} out of range [0, {scene.frames})")
    pose = scene.ego_trajectory[frame]

    p1w, p2w, seg_h = _frame_segments(scene, frame)
    # move surfaces into the vehicle frame so emitted points need no
    # further transform
    c, s = math.cos(-pose.yaw), math.sin(-pose.yaw)
    rot = np.array([[c, -s], [s, c]])
    origin = np.array([pose.x, pose.y])
    p1 = (p1w - origin) @ rot.T
    p2 = (p2w - origin) @ rot.T

    az = sensor.azimuths()
    el = sensor.elevations()
    u = np.stack([np.cos(az), np.sin(az)], axis=1)  # (A, 2)

    d = p2 - p1
    rel = p1  # sensor sits at the planar origin
    denom = u[:, None, 0] * d[None, :, 1] - u[:, None, 1] * d[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[None, :, 0] * d[None, :, 1] - rel[None, :, 1] * d[None, :, 0]) / denom
        sgm = (rel[None, :, 0] * u[:, None, 1] - rel[None, :, 1] * u[:, None, 0]) / denom
    planar_ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (sgm >= 0.0) & (sgm <= 1.0)

    tan_e = np.tan(el)
    cos_e = np.cos(el)
    h_s = sensor.height
    # beam height where it crosses each segment, per (azimuth, ring, segment)
    with np.errstate(invalid="ignore"):
        z = h_s + t[:, None, :] * tan_e[None, :, None]
        ok = planar_ok[:, None, :] & (z >= 0.0) & (z <= seg_h[None, None, :])
    rho = np.where(ok, t[:, None, :], np.inf).min(axis=2) if len(seg_h) else np.full(
        (len(az), len(el)), np.inf
    )

    with np.errstate(divide="ignore"):
        rho_ground = np.where(tan_e < 0.0, -h_s / tan_e, np.inf)  # (E,)
    ground_first = rho_ground[None, :] < rho
    planar = np.where(ground_first, rho_ground[None, :], rho)
    rng3d = planar / cos_e[None, :]
    hit = np.isfinite(planar) & (rng3d <= sensor.max_range)

    ai, ei = np.nonzero(hit)
    r = rng3d[ai, ei]
    if sensor.range_jitter > 0.0:
        gen = np.random.Generator(
            np.random.Philox(key=np.array([sensor.jitter_seed, frame], dtype=np.uint64))
        )
        jitter = gen.normal(0.0, sensor.range_jitter, size=hit.shape)
        r = r + jitter[ai, ei]
    dirs = np.stack(
        [np.cos(el)[ei] * np.cos(az)[ai], np.cos(el)[ei] * np.sin(az)[ai], np.sin(el)[ei]],
        axis=1,
    )
    xyz = np.array([0.0, 0.0, h_s]) + r[:, None] * dirs
    return PointCloud(
        timestamp=pose.timestamp, xyz=xyz, ground=ground_first[ai, ei]
    )


def simulate_sequence(scene: SceneSequence, sensor: SensorConfig) -> list[PointCloud]:
    return [simulate_lidar(scene, k, sensor) for k in range(scene.frames)]
