"""Evaluation metrics and the preprocessing timing harness.

Velocity end-point error, dynamic/static separation mIoU, and per-class
semantic IoU are all computed over label-occupied cells inside the ROI —
the region where labels are defined.  Every metric reduces to sufficient
counts held in a :class:`MetricsAccumulator`, so per-frame accumulators
merge into exactly the same report as one pass over the concatenated
frames, and absent categories are reported as ``None`` rather than 0.

``bench_preprocessing`` times the two front ends (BEV encoding vs.
classical ground removal + raycasting) over a stored sequence.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bev import encode_bev
from .ism import measurement_grid
from .labels import DYNAMIC_SPEED, IGNORE, SEMANTIC_CLASS_COUNT, LabelSet

# label occupancy values are {0, 0.5, 1}; this threshold picks the occupied ones
OCC_VALIDITY = 0.7

SEMANTIC_NAMES = (
    "static",
    "vehicle_dyn",
    "large_vehicle_dyn",
    "pedestrian_dyn",
    "two_wheeler_dyn",
    "vehicle_static",
    "large_vehicle_static",
    "pedestrian_static",
    "two_wheeler_static",
)


@dataclass
class MetricsReport:
    """Final metric values; ``None`` marks a category with no support."""

    epe_occ: float | None
    epe_dyn: float | None
    miou_dyn_static: float | None
    iou_per_class: tuple
    miou_sem: float | None
    counts: dict

    def __post_init__(self) -> None:
        for name in ("epe_occ", "epe_dyn"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        fractions = [self.miou_dyn_static, self.miou_sem, *self.iou_per_class]
        for v in fractions:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError("IoU fractions must lie in [0, 1]")


@dataclass
class MetricsAccumulator:
    """Streaming sufficient statistics: EPE sums plus confusion counts."""

    dyn_threshold: float = 0.5
    epe_occ_sum: float = 0.0
    epe_occ_n: int = 0
    epe_dyn_sum: float = 0.0
    epe_dyn_n: int = 0
    # [label, pred] with 0 = static, 1 = dynamic, over occupied ROI cells
    dyn_counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    sem_counts: np.ndarray = field(
        default_factory=lambda: np.zeros((SEMANTIC_CLASS_COUNT, SEMANTIC_CLASS_COUNT), dtype=np.int64)
    )

    def update(
        self,
        labels: LabelSet,
        vel: np.ndarray | None = None,
        dyn: np.ndarray | None = None,
        cls: np.ndarray | None = None,
    ) -> None:
        """Add one frame; any subset of predictions may be supplied."""
        occupied = (np.asarray(labels.occ, dtype=np.float64) > OCC_VALIDITY) & (
            np.asarray(labels.roi) == 1
        )
        if vel is not None:
            vel = np.asarray(vel, dtype=np.float64)
            if vel.shape != labels.vel.shape:
                raise ValueError(f"velocity shape {vel.shape} != labels {labels.vel.shape}")
            err = np.linalg.norm(vel - labels.vel, axis=2)
            self.epe_occ_sum += float(err[occupied].sum())
            self.epe_occ_n += int(occupied.sum())
            moving = occupied & (np.linalg.norm(labels.vel, axis=2) > DYNAMIC_SPEED)
            self.epe_dyn_sum += float(err[moving].sum())
            self.epe_dyn_n += int(moving.sum())
        if dyn is not None:
            dyn = np.asarray(dyn, dtype=np.float64)
            pred_moving = dyn[occupied] >= self.dyn_threshold
            label_moving = np.asarray(labels.dyn)[occupied] == 1
            for lab in (0, 1):
                for pred in (0, 1):
                    self.dyn_counts[lab, pred] += int(
                        ((label_moving == lab) & (pred_moving == pred)).sum()
                    )
        if cls is not None:
            cls = np.asarray(cls)
            pred_ids = cls.argmax(axis=2) if cls.ndim == 3 else cls
            mask = occupied & (np.asarray(labels.sem) != IGNORE)
            lab = np.asarray(labels.sem)[mask].astype(np.int64)
            pred = pred_ids[mask].astype(np.int64)
            np.add.at(self.sem_counts, (lab, pred), 1)

    def merge(self, other: "MetricsAccumulator") -> None:
        if other.dyn_threshold != self.dyn_threshold:
            raise ValueError("cannot merge accumulators with different thresholds")
        self.epe_occ_sum += other.epe_occ_sum
        self.epe_occ_n += other.epe_occ_n
        self.epe_dyn_sum += other.epe_dyn_sum
        self.epe_dyn_n += other.epe_dyn_n
        self.dyn_counts += other.dyn_counts
        self.sem_counts += other.sem_counts

    def report(self) -> MetricsReport:
        epe_occ = self.epe_occ_sum / self.epe_occ_n if self.epe_occ_n else None
        epe_dyn = self.epe_dyn_sum / self.epe_dyn_n if self.epe_dyn_n else None

        ious = []
        for c in (1, 0):  # dynamic, static
            tp = self.dyn_counts[c, c]
            union = self.dyn_counts[c, :].sum() + self.dyn_counts[:, c].sum() - tp
            if union:
                ious.append(tp / union)
        miou_dyn = float(np.mean(ious)) if ious else None

        per_class: list = []
        present = []
        for c in range(SEMANTIC_CLASS_COUNT):
            tp = self.sem_counts[c, c]
            union = self.sem_counts[c, :].sum() + self.sem_counts[:, c].sum() - tp
            if union:
                iou = float(tp / union)
                per_class.append(iou)
                present.append(iou)
            else:
                per_class.append(None)
        miou_sem = float(np.mean(present)) if present else None

        counts = {
            "occupied": int(self.epe_occ_n),
            "dynamic": int(self.epe_dyn_n),
            "dyn_eval": int(self.dyn_counts.sum()),
            "sem_eval": int(self.sem_counts.sum()),
        }
        for c, name in enumerate(SEMANTIC_NAMES):
            counts[name] = int(self.sem_counts[c, :].sum())
        return MetricsReport(
            epe_occ=epe_occ,
            epe_dyn=epe_dyn,
            miou_dyn_static=miou_dyn,
            iou_per_class=tuple(per_class),
            miou_sem=miou_sem,
            counts=counts,
        )


# ---------------------------------------------------------------------------
# single-frame conveniences


def epe(pred_vel: np.ndarray, label_vel: np.ndarray, labels: LabelSet) -> tuple:
    """(mean L2 error over occupied ROI cells, same over moving cells)."""
    if label_vel is not labels.vel:
        labels = replace(labels, vel=np.asarray(label_vel, dtype=np.float64))
    acc = MetricsAccumulator()
    acc.update(labels, vel=pred_vel)
    report = acc.report()
    return report.epe_occ, report.epe_dyn


def dyn_static_miou(pred_dyn: np.ndarray, labels: LabelSet, threshold: float = 0.5):
    """Mean IoU of the dynamic and static classes over occupied ROI cells."""
    acc = MetricsAccumulator(dyn_threshold=threshold)
    acc.update(labels, dyn=pred_dyn)
    return acc.report().miou_dyn_static


def semantic_iou(pred_cls: np.ndarray, labels: LabelSet) -> tuple:
    """(per-class IoU tuple, mIoU over classes present in the union)."""
    acc = MetricsAccumulator()
    acc.update(labels, cls=pred_cls)
    report = acc.report()
    return report.iou_per_class, report.miou_sem


# ---------------------------------------------------------------------------
# report formatting


def _cell(value) -> str:
    return "" if value is None else f"{value:.6f}"


def metrics_csv(report: MetricsReport) -> str:
    """One-row CSV; absent categories are empty fields."""
    header = ["epe_occ", "epe_dyn", "miou_dyn_static"]
    header += [f"iou_{name}" for name in SEMANTIC_NAMES]
    header.append("miou_sem")
    row = [_cell(report.epe_occ), _cell(report.epe_dyn), _cell(report.miou_dyn_static)]
    row += [_cell(v) for v in report.iou_per_class]
    row.append(_cell(report.miou_sem))
    return ",".join(header) + "\n" + ",".join(row) + "\n"


def format_report(report: MetricsReport) -> str:
    """Aligned human-readable table; '-' marks absent categories."""

    def show(value, unit=""):
        return "-" if value is None else f"{value:.4f}{unit}"

    lines = [
        f"EPE (occupied cells):   {show(report.epe_occ, ' m/s')}   [{report.counts['occupied']} cells]",
        f"EPE (dynamic cells):    {show(report.epe_dyn, ' m/s')}   [{report.counts['dynamic']} cells]",
        f"mIoU dynamic/static:    {show(report.miou_dyn_static)}",
        "per-class IoU:",
    ]
    for name, iou in zip(SEMANTIC_NAMES, report.iou_per_class):
        lines.append(f"  {name:<22} {show(iou)}   [{report.counts[name]} cells]")
    lines.append(f"mIoU (present classes): {show(report.miou_sem)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# preprocessing benchmark


@dataclass(frozen=True)
class TimingReport:
    pipeline: str
    frames: int
    median_ms: float
    p95_ms: float
    samples_ms: tuple


def bench_preprocessing(directory: str, pipeline: str, warmup: int = 2) -> TimingReport:
    """Per-frame wall-clock timing of one preprocessing front end.

    ``bev`` times binary BEV encoding of the raw cloud; ``ism`` times the
    classical chain (ground removal + inverse sensor model raycast).  The
    first ``warmup`` frames are excluded from the statistics.
    """
    from .dataio import read_sequence  # local import: dataio imports are heavy

    if pipeline not in ("bev", "ism"):
        raise ValueError(f"pipeline must be 'bev' or 'ism', got {pipeline!r}")
    seq = read_sequence(directory)
    times = []
    for bundle in seq.bundles:
        t0 = time.perf_counter()
        if pipeline == "bev":
            encode_bev(bundle.cloud.xyz, bundle.pose, seq.spec)
        else:
            measurement_grid(bundle.cloud, bundle.pose, seq.spec)
        times.append((time.perf_counter() - t0) * 1e3)
    kept = times[warmup:] if len(times) > warmup else times
    return TimingReport(
        pipeline=pipeline,
        frames=len(kept),
        median_ms=float(np.median(kept)),
        p95_ms=float(np.percentile(kept, 95)),
        samples_ms=tuple(kept),
    )
