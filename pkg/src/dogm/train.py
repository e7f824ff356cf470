"""Sequence training: windowed truncated-BPTT over the recurrent grid
network, with whole-scene rotation augmentation, an adaptive-moment
optimizer, and checkpoint/resume support.

Each iteration draws its own counter-based random stream, so a run is a
pure function of (dataset, configs, seed) and resuming from a checkpoint
replays the exact trajectory the uninterrupted run would have taken.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from . import engine
from .bev import encode_core
from .dataio import FrameBundle, LoadedSequence, format_kv, read_kv_file, read_sequence
from .engine import NumericFault, Tensor
from .grid import Pose
from .labels import ROI_MARGIN, label_frame, rasterize_polygon
from .losses import LossConfig, frame_losses, total_loss
from .model import Model, ModelConfig, build_model, place_and_shift, pose_anchor

TASKS = ("occ", "v", "dyn", "road", "cls", "gc")

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    n_in: int = 10
    supervised_steps: int = 2
    base_lr: float = 1e-4
    decay_interval: int = 1000  # halve the learning rate every this many steps
    max_iterations: int = 1000
    dropout: float = 0.1
    rotation_augmentation: bool = True
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self) -> None:
        if self.n_in < 1:
            raise ValueError("n_in must be at least 1")
        if not 1 <= self.supervised_steps <= self.n_in:
            raise ValueError("supervised_steps must be in [1, n_in]")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def write_train_config(config: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv({f.name: getattr(config, f.name) for f in fields(config)}))


def read_train_config(path: str) -> TrainConfig:
    kv = read_kv_file(path)
    try:
        return TrainConfig(
            n_in=int(kv["n_in"]),
            supervised_steps=int(kv["supervised_steps"]),
            base_lr=float(kv["base_lr"]),
            decay_interval=int(kv["decay_interval"]),
            max_iterations=int(kv["max_iterations"]),
            dropout=float(kv["dropout"]),
            rotation_augmentation=bool(kv["rotation_augmentation"]),
            seed=int(kv["seed"]),
            checkpoint_interval=int(kv["checkpoint_interval"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing train config key {exc}") from exc


# ---------------------------------------------------------------------------
# sample preparation


def label_sequence(sequence: LoadedSequence) -> None:
    """Fill in missing per-frame labels, differencing consecutive boxes.

    The first frame has no look-back, so its velocity labels read zero.
    """
    prev: FrameBundle | None = None
    for bundle in sequence.bundles:
        if bundle.labels is None:
            prev_boxes = prev.boxes if prev is not None else bundle.boxes
            bundle.labels = label_frame(
                bundle.cloud,
                bundle.boxes,
                prev_boxes,
                bundle.pose,
                sequence.driveable,
                sequence.spec,
                sequence.dt,
            )
        prev = bundle


def _rotation_terms(degrees: int) -> tuple[float, float]:
    # quarter turns get exact matrix entries so they permute the cell
    # lattice without rounding
    if degrees % 90 == 0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][(degrees // 90) % 4]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def rotate_sample(
    sample: LoadedSequence,
    degrees: int,
    center: tuple[float, float] | None = None,
) -> LoadedSequence:
    """Rotate a whole sample rigidly about the grid center.

    Poses, boxes, and the driveable polygon turn by ``degrees``
    (counter-clockwise); the stored sweeps are ego-relative and therefore
    untouched — their world-frame points turn through the rotated poses.
    Labels are regenerated from the rotated primitives for every frame
    that carried them, never by resampling label grids.  ``center``
    defaults to the first frame's position, where the grid starts out
    anchored.  The first frame has no look-back within the sample, so its
    regenerated velocity labels read zero.
    """
    if int(degrees) != degrees:
        raise ValueError("rotation must be a whole number of degrees")
    degrees = int(degrees)
    if not 0 <= degrees < 360:
        raise ValueError(f"rotation must lie in [0, 360), got {degrees}")
    if degrees == 0:
        return sample
    if not sample.bundles:
        raise ValueError("cannot rotate an empty sample")
    if sample.polygon is None:
        raise ValueError("sample carries no driveable polygon; cannot rotate labels")
    if center is None:
        center = (sample.bundles[0].pose.x, sample.bundles[0].pose.y)
    cx, cy = float(center[0]), float(center[1])
    c, s = _rotation_terms(degrees)
    rad = math.radians(degrees)

    poly = np.asarray(sample.polygon, dtype=np.float64)
    rx, ry = poly[:, 0] - cx, poly[:, 1] - cy
    polygon = np.column_stack((cx + c * rx - s * ry, cy + s * rx + c * ry))
    spec = sample.spec
    half_diag = 0.5 * math.hypot(
        spec.length_cells * spec.cell_length, spec.width_cells * spec.cell_width
    )
    res = sample.driveable.resolution
    margin = res * math.ceil((ROI_MARGIN + half_diag) / res)
    driveable = rasterize_polygon(polygon, res, margin=margin)

    rotated: list[FrameBundle] = []
    for bundle in sample.bundles:
        px, py = bundle.pose.x - cx, bundle.pose.y - cy
        pose = Pose(
            bundle.pose.timestamp,
            cx + c * px - s * py,
            cy + s * px + c * py,
            bundle.pose.yaw + rad,
        )
        boxes = []
        for box in bundle.boxes:
            bx, by = box.cx - cx, box.cy - cy
            boxes.append(
                replace(box, cx=cx + c * bx - s * by, cy=cy + s * bx + c * by, yaw=box.yaw + rad)
            )
        rotated.append(FrameBundle(bundle.cloud, pose, boxes, None))

    for k, (original, bundle) in enumerate(zip(sample.bundles, rotated)):
        if original.labels is None:
            continue
        prev_boxes = rotated[k - 1].boxes if k > 0 else bundle.boxes
        bundle.labels = label_frame(
            bundle.cloud, bundle.boxes, prev_boxes, bundle.pose, driveable, spec, sample.dt
        )
    return LoadedSequence(
        spec, sample.dt, sample.ground_height, driveable, polygon, rotated
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class MomentState:
    """First and second moment estimates, one array per parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def zero_moments(params: dict[str, Tensor]) -> MomentState:
    return MomentState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def learning_rate(step: int, config: TrainConfig) -> float:
    return config.base_lr * 0.5 ** (step // config.decay_interval)


def adaptive_moment_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: MomentState,
    step: int,
    config: TrainConfig,
) -> dict[str, Tensor]:
    """One bias-corrected adaptive-moment update, in place.

    A non-finite gradient anywhere skips the whole step (a warning notes
    which parameter) so one bad window cannot poison the weights.
    """
    if step < 1:
        raise ValueError("step count is 1-based")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match {name} {p.data.shape}"
            )
    for name in params:
        if not np.isfinite(grads[name]).all():
            warnings.warn(f"non-finite gradient in {name}; step {step} skipped")
            return params
    lr = learning_rate(step, config)
    c1 = 1.0 - BETA1**step
    c2 = 1.0 - BETA2**step
    for name, p in params.items():
        g = grads[name]
        m, v = moments.m[name], moments.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * np.square(g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + EPSILON)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str, params: dict[str, Tensor], moments: MomentState, iteration: int
) -> None:
    arrays: dict[str, np.ndarray] = {"iteration": np.int64(iteration)}
    for name, p in params.items():
        arrays[f"param.{name}"] = p.data
    for name, m in moments.m.items():
        arrays[f"m.{name}"] = m
    for name, v in moments.v.items():
        arrays[f"v.{name}"] = v
    np.savez_compressed(path, **arrays)


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], MomentState, int]:
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    with np.load(path) as data:
        iteration = int(data["iteration"])
        for key in data.files:
            stem = key.partition(".")[2]
            if key.startswith("param."):
                params[stem] = Tensor(data[key], requires_grad=True, name=stem)
            elif key.startswith("m."):
                m[stem] = data[key]
            elif key.startswith("v."):
                v[stem] = data[key]
    if not params:
        raise ValueError(f"{path}: no parameters stored")
    if set(m) != set(params) or set(v) != set(params):
        raise ValueError(f"{path}: moment arrays do not match parameters")
    return params, MomentState(m, v), iteration


# ---------------------------------------------------------------------------
# the loop


def discover_sequences(root: str) -> list[str]:
    """The dataset directory is either one sequence or a folder of them."""
    if os.path.exists(os.path.join(root, "manifest.txt")):
        return [root]
    found = sorted(
        entry.path
        for entry in os.scandir(root)
        if entry.is_dir() and os.path.exists(os.path.join(entry.path, "manifest.txt"))
    )
    if not found:
        raise ValueError(f"{root}: no sequence manifest found")
    return found


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based stream for one iteration; disjoint across iterations."""
    counter = np.array([0, 0, 0, iteration], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=counter))


def window_loss(
    model: Model,
    params: dict[str, Tensor],
    window: LoadedSequence,
    config: TrainConfig,
    loss_config: LossConfig,
    rng: np.random.Generator | None = None,
    cores: list[np.ndarray] | None = None,
    mode: str = "train",
) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward a window, decoding and scoring only the supervised tail.

    Earlier frames shape the recurrent state but skip the decoders
    entirely.  Returns the weighted total and the raw per-task losses
    summed over the supervised steps.
    """
    if len(window.bundles) != config.n_in:
        raise ValueError(f"window has {len(window.bundles)} frames, expected {config.n_in}")
    spec = window.spec
    first = window.bundles[0]
    state = model.initial_state(
        pose_anchor(first.pose, spec), dtype=params["enc0a_w"].data.dtype
    )
    first_supervised = config.n_in - config.supervised_steps
    per_task: dict[str, Tensor] = {}
    for k, bundle in enumerate(window.bundles):
        core = cores[k] if cores is not None else encode_core(bundle.cloud.xyz, bundle.pose, spec)
        bev, state = place_and_shift(core, bundle.pose, state, spec)
        output, state = model.forward_step(
            params, bev, state, mode=mode, rng=rng, decode=k >= first_supervised
        )
        if output is None:
            continue
        if bundle.labels is None:
            raise ValueError(f"supervised frame {k} has no labels")
        for task, value in frame_losses(output, bundle.labels, loss_config).items():
            per_task[task] = value if task not in per_task else engine.add(per_task[task], value)
    return total_loss(per_task, loss_config), per_task


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model: Model
    log_path: str
    checkpoints: tuple[str, ...]
    iterations: int


def train(
    dataset_dir: str,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str,
    loss_config: LossConfig | None = None,
    resume: str | None = None,
) -> TrainResult:
    """Optimize the network on every sequence found under ``dataset_dir``.

    Per iteration: draw a window of ``n_in`` consecutive frames from a
    random sequence, rotate the whole sample by a random whole degree
    (when augmentation is on), stream it through the network, and descend
    the supervised-tail loss.  Appends one row per iteration to
    ``train_log.csv`` and writes ``checkpoint_NNNNNN.npz`` periodically;
    a numeric fault checkpoints the last good state and re-raises.
    """
    if loss_config is None:
        loss_config = LossConfig()
    sequences = [read_sequence(d) for d in discover_sequences(dataset_dir)]
    usable = [seq for seq in sequences if len(seq) >= config.n_in]
    if not usable:
        raise ValueError(f"{dataset_dir}: no sequence has at least n_in={config.n_in} frames")
    if len(usable) < len(sequences):
        warnings.warn(
            f"skipping {len(sequences) - len(usable)} sequence(s) shorter than n_in"
        )
    for seq in usable:
        label_sequence(seq)

    model_config = replace(model_config, n_in=config.n_in, dropout=config.dropout)
    params, model = build_model(model_config, seed=config.seed)
    moments = zero_moments(params)
    start = 0
    if resume is not None:
        params, moments, start = load_checkpoint(resume)
        for name, shape in model.parameter_shapes().items():
            if name not in params or params[name].data.shape != shape:
                raise ValueError(f"{resume}: checkpoint does not match the model config ({name})")

    # sweep encodings depend only on (cloud, pose, grid), so unrotated
    # iterations reuse them across the whole run
    cores = [
        [encode_core(b.cloud.xyz, b.pose, seq.spec) for b in seq.bundles] for seq in usable
    ]

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")
    log_exists = os.path.exists(log_path)
    checkpoints: list[str] = []
    with open(log_path, "w" if start == 0 else "a", encoding="utf-8") as log:
        if start == 0 or not log_exists:
            log.write("iteration," + ",".join(TASKS) + ",total,lr\n")
        for it in range(start + 1, config.max_iterations + 1):
            rng = iteration_rng(config.seed, it)
            si = int(rng.integers(len(usable)))
            seq = usable[si]
            t0 = int(rng.integers(len(seq) - config.n_in + 1))
            degrees = int(rng.integers(360)) if config.rotation_augmentation else 0

            keep_from = config.n_in - config.supervised_steps
            bundles = []
            for k in range(config.n_in):
                b = seq.bundles[t0 + k]
                # labels outside the supervised tail are never scored, so
                # don't pay to regenerate them under rotation
                bundles.append(b if k >= keep_from else FrameBundle(b.cloud, b.pose, b.boxes, None))
            window = LoadedSequence(
                seq.spec, seq.dt, seq.ground_height, seq.driveable, seq.polygon, bundles
            )
            win_cores = None
            if degrees == 0:
                win_cores = cores[si][t0 : t0 + config.n_in]
            else:
                window = rotate_sample(window, degrees)

            try:
                total, per_task = window_loss(
                    model, params, window, config, loss_config, rng=rng, cores=win_cores
                )
                engine.backward(total)
            except NumericFault:
                rescue = os.path.join(out_dir, f"checkpoint_abort_{it - 1:06d}.npz")
                save_checkpoint(rescue, params, moments, it - 1)
                raise
            grads = {
                name: p.grad if p.grad is not None else np.zeros_like(p.data)
                for name, p in params.items()
            }
            adaptive_moment_step(params, grads, moments, it, config)
            for p in params.values():
                p.grad = None

            row = [str(it)]
            row += [f"{float(per_task[t].data):.17g}" if t in per_task else "" for t in TASKS]
            row.append(f"{float(total.data):.17g}")
            row.append(f"{learning_rate(it, config):.17g}")
            log.write(",".join(row) + "\n")

            if it % config.checkpoint_interval == 0 or it == config.max_iterations:
                path = os.path.join(out_dir, f"checkpoint_{it:06d}.npz")
                save_checkpoint(path, params, moments, it)
                checkpoints.append(path)
    return TrainResult(params, model, log_path, tuple(checkpoints), config.max_iterations - start)
