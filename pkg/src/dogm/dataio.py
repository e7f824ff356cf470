"""On-disk formats: sequence directories, label bundles, renders, checkpoints.

Everything here is the artifact's public data contract (see
``docs/formats.md`` for the bit-exact layouts).  Text files carry numeric
fields with six decimal places; binary payloads are little-endian.

Sequence directory layout::

    manifest.txt           key = value metadata (grid spec, dt, frame count)
    poses.txt              one line per frame: t x y yaw
    frame_NNNNNN.pts       one line per point: x y z g      (g ∈ {0, 1})
    boxes_NNNNNN.txt       one line per box: id class cx cy yaw length width
    driveable.pgm          binary P5 raster, driveable = 255
    driveable.meta         resolution and origin of the raster
    driveable_poly.txt     polygon vertices (one "x y" line each)

Images put +x (east) at the top row and +y along the columns.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Pose
from .labels import Box, DriveableMap, LabelSet
from .scene import PointCloud, SceneSequence

__all__ = [
    "ParseError",
    "FrameBundle",
    "LoadedSequence",
    "PointCloud",
    "parse_kv",
    "format_kv",
    "read_kv_file",
    "write_sequence",
    "read_sequence",
    "write_labels",
    "read_labels",
    "render_grid",
    "render_occupancy",
    "render_velocity",
    "render_semantics",
    "render_occupancy_road",
    "write_tensor_bundle",
    "read_tensor_bundle",
    "write_checkpoint",
    "read_checkpoint",
]


class ParseError(ValueError):
    """Malformed on-disk data; the message carries file and line context."""


@dataclass
class FrameBundle:
    cloud: PointCloud
    pose: Pose
    boxes: list[Box]
    labels: LabelSet | None = None

    def __post_init__(self) -> None:
        if abs(self.cloud.timestamp - self.pose.timestamp) > 1e-9:
            raise ValueError("cloud and pose timestamps must match")


@dataclass
class LoadedSequence:
    spec: GridSpec
    dt: float
    ground_height: float
    driveable: DriveableMap
    polygon: np.ndarray | None
    bundles: list[FrameBundle]

    def __iter__(self):
        return iter(self.bundles)

    def __len__(self) -> int:
        return len(self.bundles)


# ---------------------------------------------------------------------------
# key = value files

def parse_kv(text: str, source: str = "<string>") -> dict:
    """Parse ``key = value`` lines; '#' starts a comment.  Values become
    int/float/bool where they parse as such, multi-token values become
    lists."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key or any(ch.isspace() for ch in key):
            raise ParseError(f"{source}:{lineno}: bad key {key!r}")
        tokens = value.split()
        if not tokens:
            raise ParseError(f"{source}:{lineno}: missing value for {key!r}")
        parsed = [_parse_token(t) for t in tokens]
        out[key] = parsed[0] if len(parsed) == 1 else parsed
    return out


def _parse_token(token: str):
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{value:.6f}"
    return str(value)


def format_kv(mapping: dict) -> str:
    lines = []
    for key, value in mapping.items():
        if isinstance(value, (list, tuple)):
            lines.append(f"{key} = " + " ".join(_fmt(v) for v in value))
        else:
            lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def read_kv_file(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=path)


# ---------------------------------------------------------------------------
# sequence directories

def _parse_table(path: str, columns: int, kind: str) -> np.ndarray:
    """Whitespace table of floats with exact column count; empty file OK."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != columns:
            raise ParseError(
                f"{path}:{lineno}: expected {columns} {kind} fields, got {len(parts)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
    if not rows:
        return np.zeros((0, columns))
    return np.asarray(rows, dtype=np.float64)


def write_sequence(
    scene: SceneSequence,
    clouds: list[PointCloud],
    driveable: DriveableMap,
    spec: GridSpec,
    directory: str,
) -> str:
    """Persist a simulated sequence; returns the manifest path."""
    if len(clouds) != scene.frames:
        raise ValueError("need one point cloud per frame")
    os.makedirs(directory, exist_ok=True)

    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(
            format_kv(
                {
                    "format": "sequence-v1",
                    "frames": scene.frames,
                    "dt": scene.dt,
                    "ground_height": scene.ground_height,
                    "length_cells": spec.length_cells,
                    "width_cells": spec.width_cells,
                    "cell_length": spec.cell_length,
                    "cell_width": spec.cell_width,
                    "height_min": spec.height_min,
                    "height_max": spec.height_max,
                    "cell_height": spec.cell_height,
                }
            )
        )

    with open(os.path.join(directory, "poses.txt"), "w", encoding="utf-8") as fh:
        for pose in scene.ego_trajectory:
            fh.write(f"{pose.timestamp:.6f} {pose.x:.6f} {pose.y:.6f} {pose.yaw:.6f}\n")

    for k, cloud in enumerate(clouds):
        with open(os.path.join(directory, f"frame_{k:06d}.pts"), "w", encoding="utf-8") as fh:
            for (x, y, z), g in zip(cloud.xyz, cloud.ground):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(g)}\n")
        with open(os.path.join(directory, f"boxes_{k:06d}.txt"), "w", encoding="utf-8") as fh:
            for obj in scene.objects:
                cx, cy, yaw = obj.trajectory[k]
                if any(ch.isspace() for ch in obj.raw_class):
                    raise ValueError(f"class label {obj.raw_class!r} contains whitespace")
                fh.write(
                    f"{obj.id} {obj.raw_class} {cx:.6f} {cy:.6f} {yaw:.6f} "
                    f"{obj.length:.6f} {obj.width:.6f}\n"
                )

    _write_driveable(driveable, directory)
    with open(os.path.join(directory, "driveable_poly.txt"), "w", encoding="utf-8") as fh:
        for x, y in scene.driveable_polygon:
            fh.write(f"{x:.6f} {y:.6f}\n")
    return manifest


def _write_driveable(driveable: DriveableMap, directory: str) -> None:
    img = np.where(driveable.data[::-1, :], 255, 0).astype(np.uint8)
    with open(os.path.join(directory, "driveable.pgm"), "wb") as fh:
        fh.write(_pgm_bytes(img))
    with open(os.path.join(directory, "driveable.meta"), "w", encoding="utf-8") as fh:
        fh.write(
            format_kv(
                {
                    "resolution": driveable.resolution,
                    "origin_x": driveable.origin[0],
                    "origin_y": driveable.origin[1],
                }
            )
        )


def _read_driveable(directory: str) -> DriveableMap:
    meta = read_kv_file(os.path.join(directory, "driveable.meta"))
    img = _read_pgm(os.path.join(directory, "driveable.pgm"))
    data = img[::-1, :] >= 128
    return DriveableMap(
        data=data,
        resolution=float(meta["resolution"]),
        origin=(float(meta["origin_x"]), float(meta["origin_y"])),
    )


def read_sequence(directory: str) -> LoadedSequence:
    """Load a sequence directory; every frame is validated against the
    manifest."""
    manifest_path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"{manifest_path}: manifest missing")
    manifest = read_kv_file(manifest_path)
    try:
        frames = int(manifest["frames"])
        spec = GridSpec(
            length_cells=int(manifest["length_cells"]),
            width_cells=int(manifest["width_cells"]),
            cell_length=float(manifest["cell_length"]),
            cell_width=float(manifest["cell_width"]),
            height_min=float(manifest["height_min"]),
            height_max=float(manifest["height_max"]),
            cell_height=float(manifest["cell_height"]),
        )
        dt = float(manifest["dt"])
        ground_height = float(manifest.get("ground_height", 0.0))
    except KeyError as exc:
        raise ParseError(f"{manifest_path}: missing key {exc}") from None

    pose_rows = _parse_table(os.path.join(directory, "poses.txt"), 4, "pose")
    if len(pose_rows) != frames:
        raise ParseError(
            f"{directory}/poses.txt: {len(pose_rows)} poses for {frames} frames"
        )

    bundles = []
    for k in range(frames):
        pose = Pose(*pose_rows[k])
        pts_path = os.path.join(directory, f"frame_{k:06d}.pts")
        if not os.path.exists(pts_path):
            raise ParseError(f"{pts_path}: frame file missing")
        pts = _parse_table(pts_path, 4, "point")
        cloud = PointCloud(
            timestamp=pose.timestamp, xyz=pts[:, :3], ground=pts[:, 3] > 0.5
        )
        boxes = _read_boxes(os.path.join(directory, f"boxes_{k:06d}.txt"))
        bundles.append(FrameBundle(cloud=cloud, pose=pose, boxes=boxes))

    poly_path = os.path.join(directory, "driveable_poly.txt")
    polygon = None
    if os.path.exists(poly_path):
        polygon = _parse_table(poly_path, 2, "vertex")
    return LoadedSequence(
        spec=spec,
        dt=dt,
        ground_height=ground_height,
        driveable=_read_driveable(directory),
        polygon=polygon,
        bundles=bundles,
    )


def _read_boxes(path: str) -> list[Box]:
    if not os.path.exists(path):
        raise ParseError(f"{path}: box file missing")
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ParseError(f"{path}:{lineno}: expected 7 box fields, got {len(parts)}")
            try:
                boxes.append(
                    Box(
                        id=int(parts[0]),
                        raw_class=parts[1],
                        cx=float(parts[2]),
                        cy=float(parts[3]),
                        yaw=float(parts[4]),
                        length=float(parts[5]),
                        width=float(parts[6]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad box field ({exc})") from None
    return boxes


# ---------------------------------------------------------------------------
# label bundles

_LABEL_LAYERS = ("occ", "vel", "dyn", "sem", "road", "gc", "roi", "observable")


def write_labels(labels: LabelSet, directory: str, frame: int) -> str:
    path = os.path.join(directory, f"labels_{frame:06d}.bin")
    write_tensor_bundle(
        path, {name: np.asarray(getattr(labels, name)) for name in _LABEL_LAYERS}
    )
    return path


def read_labels(directory: str, frame: int) -> LabelSet:
    tensors = read_tensor_bundle(os.path.join(directory, f"labels_{frame:06d}.bin"))
    missing = [n for n in _LABEL_LAYERS if n not in tensors]
    if missing:
        raise ParseError(f"label bundle missing layers: {missing}")
    kw = {}
    for name in _LABEL_LAYERS:
        arr = tensors[name]
        if name in ("occ", "vel"):
            kw[name] = arr.astype(np.float64)
        else:
            kw[name] = arr.astype(np.uint8)
    return LabelSet(**kw)


# ---------------------------------------------------------------------------
# renders

VELOCITY_WHEEL = np.array(
    [
        (255, 0, 0), (255, 128, 0), (255, 255, 0), (128, 255, 0),
        (0, 255, 0), (0, 255, 128), (0, 255, 255), (0, 128, 255),
        (0, 0, 255), (128, 0, 255), (255, 0, 255), (255, 0, 128),
    ],
    dtype=np.uint8,
)

_DYNAMIC_COLORS = {
    0: (128, 128, 128),  # STA
    1: (220, 20, 60),  # V
    2: (139, 0, 0),  # LV
    3: (0, 200, 0),  # PED
    4: (255, 140, 0),  # TW
}
SEMANTIC_PALETTE = np.full((256, 3), 255, dtype=np.uint8)
for _cid, _rgb in _DYNAMIC_COLORS.items():
    SEMANTIC_PALETTE[_cid] = _rgb
    if _cid != 0:
        SEMANTIC_PALETTE[_cid + 4] = [round(0.55 * c) for c in _rgb]

ROAD_YELLOW = np.array([255, 215, 0], dtype=np.float64)


def _pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes()


def _ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes()


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ParseError(f"{path}: not a binary P5 image")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ParseError(f"{path}: malformed P5 header") from None
    if maxval != 255 or len(parts[3]) < w * h:
        raise ParseError(f"{path}: truncated or unsupported P5 payload")
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)


def _to_image(grid: np.ndarray) -> np.ndarray:
    """Grid (x, y) to image (row, col): +x up, +y right."""
    return grid[::-1, ...]


def render_occupancy(occ: np.ndarray) -> bytes:
    """Grayscale occupancy: occupied black, free white, unknown mid-gray."""
    occ = np.asarray(occ, dtype=np.float64)
    if occ.ndim != 2:
        raise ValueError("occupancy layer must be 2-D")
    pix = np.round(255.0 * (1.0 - occ)).astype(np.uint8)
    return _pgm_bytes(_to_image(pix))


def render_velocity(vel: np.ndarray, active: np.ndarray | None = None) -> bytes:
    """Velocity orientation on a 12-step hue wheel; inactive cells white."""
    vel = np.asarray(vel, dtype=np.float64)
    if vel.ndim != 3 or vel.shape[2] != 2:
        raise ValueError("velocity layer must be (L, W, 2)")
    mag = np.hypot(vel[..., 0], vel[..., 1])
    if active is None:
        active = mag > 0.0
    angle = np.arctan2(vel[..., 1], vel[..., 0])  # north over east
    sector = np.floor((angle % (2.0 * math.pi)) / (2.0 * math.pi) * 12.0).astype(int) % 12
    img = np.full(vel.shape[:2] + (3,), 255, dtype=np.uint8)
    img[active] = VELOCITY_WHEEL[sector[active]]
    return _ppm_bytes(_to_image(img))


def render_semantics(sem: np.ndarray) -> bytes:
    """Fixed semantic palette; IGNORE renders white."""
    sem = np.asarray(sem)
    if sem.ndim != 2:
        raise ValueError("semantic layer must be 2-D")
    img = SEMANTIC_PALETTE[sem.astype(np.uint8)]
    return _ppm_bytes(_to_image(img))


def render_occupancy_road(occ: np.ndarray, road: np.ndarray) -> bytes:
    """Occupancy grayscale with the driveable area blended 50% yellow."""
    occ = np.asarray(occ, dtype=np.float64)
    road = np.asarray(road)
    if occ.shape != road.shape:
        raise ValueError("occupancy and road layers must share a shape")
    gray = np.round(255.0 * (1.0 - occ))
    img = np.repeat(gray[..., None], 3, axis=2)
    mask = road.astype(bool)
    img[mask] = np.round(0.5 * img[mask] + 0.5 * ROAD_YELLOW)
    return _ppm_bytes(_to_image(img.astype(np.uint8)))


_RENDERERS = {
    "occupancy": render_occupancy,
    "velocity": render_velocity,
    "semantics": render_semantics,
    "occupancy_road": render_occupancy_road,
}


def render_grid(kind: str, *layers: np.ndarray) -> bytes:
    """Dispatch to one of the fixed-palette renderers by name."""
    try:
        renderer = _RENDERERS[kind]
    except KeyError:
        raise ValueError(f"unknown render kind {kind!r}; choose from {sorted(_RENDERERS)}")
    return renderer(*layers)


# ---------------------------------------------------------------------------
# tensor bundles and checkpoints

_MAGIC = "tensor-bundle-v1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1", "int64": "<i8"}


def write_tensor_bundle(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Text manifest naming each tensor, then the raw little-endian payload."""
    lines = [_MAGIC, f"tensors {len(tensors)}"]
    blobs = []
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"bad tensor name {name!r}")
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for tensor {name!r}")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dtype} {dims}".rstrip())
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
    header = "\n".join(lines) + "\npayload\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def read_tensor_bundle(
    path: str, expected: dict[str, tuple[int, ...]] | None = None
) -> dict[str, np.ndarray]:
    """Read a bundle; with ``expected``, names and shapes must match it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\npayload\n"
    split = blob.find(marker)
    if split < 0:
        raise ParseError(f"{path}: missing payload marker")
    header_lines = blob[:split].decode("ascii", errors="replace").splitlines()
    payload = blob[split + len(marker):]
    if not header_lines or header_lines[0] != _MAGIC:
        raise ParseError(f"{path}:1: not a {_MAGIC} file")
    try:
        count = int(header_lines[1].split()[1])
    except (IndexError, ValueError):
        raise ParseError(f"{path}:2: malformed tensor count") from None
    if len(header_lines) != 2 + count:
        raise ParseError(f"{path}: manifest lists {len(header_lines) - 2} of {count} tensors")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for lineno, line in enumerate(header_lines[2:], start=3):
        parts = line.split()
        if len(parts) < 2 or parts[1] not in _DTYPES:
            raise ParseError(f"{path}:{lineno}: malformed tensor line {line!r}")
        name = parts[0]
        np_dtype = np.dtype(_DTYPES[parts[1]])
        try:
            shape = tuple(int(d) for d in parts[2:])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer dimension") from None
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * np_dtype.itemsize
        if offset + nbytes > len(payload):
            raise ParseError(f"{path}: payload truncated at tensor {name!r}")
        data = np.frombuffer(payload[offset: offset + nbytes], dtype=np_dtype)
        tensors[name] = data.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ParseError(f"{path}: {len(payload) - offset} trailing payload bytes")

    if expected is not None:
        if set(expected) != set(tensors):
            raise ParseError(
                f"{path}: tensor names {sorted(tensors)} != expected {sorted(expected)}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != tuple(shape):
                raise ParseError(
                    f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {tuple(shape)}"
                )
    return tensors


def write_checkpoint(params: dict[str, np.ndarray], path: str) -> None:
    """Deployable inference weights: every tensor stored as float32."""
    write_tensor_bundle(
        path, {name: np.asarray(v, dtype=np.float32) for name, v in params.items()}
    )


def read_checkpoint(
    path: str, expected: dict[str, tuple[int, ...]] | None = None
) -> dict[str, np.ndarray]:
    tensors = read_tensor_bundle(path, expected=expected)
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise ParseError(f"{path}: checkpoint tensor {name!r} is {arr.dtype}, not float32")
    return tensors
