"""Weighted multi-task objective.

The total loss is a fixed alpha-weighted sum of six per-task terms: MSE
tasks (occupancy, velocity, dynamic mask, driveable area) with per-cell
weight grids, and cross-entropy tasks (semantic class with a focal
modulation, ground class with per-class weights).

Weight grids encode the supervision rules: velocity and dynamic-mask
errors count 20x on dynamic cells and 5x on static occupied cells and
not at all elsewhere; driveable area counts 1 on observable cells and
0.25 on unobservable ones (grid-wide — the road head is the one task
not restricted to the ROI); everything else is zeroed outside the ROI.
All losses are built on the autodiff graph, so calling ``backward`` on
the total propagates into the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import engine
from .engine import Tensor
from .labels import BACKGROUND, IGNORE, LabelSet


@dataclass(frozen=True)
class LossConfig:
    """Task weights (alpha_*), cell weights (lambda_*), and thresholds."""

    alpha_occ: float = 5.0
    alpha_v: float = 0.02
    alpha_dyn: float = 0.1
    alpha_road: float = 1.0
    alpha_cls: float = 2.0
    alpha_gc: float = 1.0
    lambda_dynamic: float = 20.0
    lambda_static: float = 5.0
    lambda_road_observable: float = 1.0
    lambda_road_unobservable: float = 0.25
    lambda_gc_background: float = 0.1
    lambda_gc_other: float = 0.5
    focal_gamma: float = 2.0
    occupancy_validity: float = 0.7
    dynamic_speed: float = 0.8

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.startswith(("alpha_", "lambda_")) and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not 0.0 < self.occupancy_validity < 1.0:
            raise ValueError("occupancy_validity must lie in (0, 1)")
        if self.dynamic_speed <= 0:
            raise ValueError("dynamic_speed must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")


_TASK_ALPHAS = ("occ", "v", "dyn", "road", "cls", "gc")


def _as_tensor(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def weighted_mse(pred: Tensor, label: np.ndarray, weight: np.ndarray) -> Tensor:
    """Mean over grid cells of weight * squared error.

    ``pred`` may carry a trailing component axis (velocities); the weight
    grid is per cell and broadcast over components, and the normalizer
    stays the cell count, so a vector task sums its component errors.
    """
    label = np.asarray(label, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if pred.data.shape != label.shape:
        raise ValueError(f"prediction {pred.data.shape} and label {label.shape} differ")
    if weight.shape != pred.data.shape[:2]:
        raise ValueError(f"weight grid {weight.shape} must be per-cell {pred.data.shape[:2]}")
    cells = pred.data.shape[0] * pred.data.shape[1]
    w = weight if pred.data.ndim == 2 else weight[:, :, None]
    sq = engine.power(engine.sub(pred, _as_tensor(label)), 2.0)
    return engine.mul_const(engine.sum_all(engine.mul(_as_tensor(np.broadcast_to(w, pred.data.shape)), sq)), 1.0 / cells)


def task_weight_grids(labels: LabelSet, cfg: LossConfig) -> dict[str, np.ndarray]:
    """Per-cell weight grids for the occ, v, dyn, road and cls tasks.

    occ and cls are 0/1 validity masks (ROI, and ROI-and-occupied); v and
    dyn take the dynamic/static weights on occupied ROI cells; road is
    graded by observability over the whole grid.
    """
    occupied = np.asarray(labels.occ, dtype=np.float64) > cfg.occupancy_validity
    dynamic = np.asarray(labels.dyn) == 1
    roi = np.asarray(labels.roi) == 1
    observable = np.asarray(labels.observable) == 1

    moving = np.where(dynamic, cfg.lambda_dynamic, cfg.lambda_static)
    v = np.where(occupied & roi, moving, 0.0)
    return {
        "occ": roi.astype(np.float64),
        "v": v,
        "dyn": v.copy(),
        "road": np.where(observable, cfg.lambda_road_observable, cfg.lambda_road_unobservable),
        "cls": (occupied & roi).astype(np.float64),
    }


def weighted_ce_focal(
    pred: Tensor,
    classes: np.ndarray,
    cfg: LossConfig,
    task: str,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Cross-entropy over a per-cell class simplex.

    For ``cls`` the per-class weight is the focal factor (1 - p)^gamma
    (differentiated through, as in the original formulation) and ``mask``
    supplies the occupied-and-in-ROI validity grid; for ``gc`` the weight
    is 0.1 on BACKGROUND cells and 0.5 elsewhere.  Cells labeled IGNORE
    contribute nothing.  The log is clamped at 1e-12.
    """
    classes = np.asarray(classes)
    L, W, C = pred.data.shape
    if classes.shape != (L, W):
        raise ValueError(f"class grid {classes.shape} does not match prediction {(L, W)}")
    sums = pred.data.sum(axis=2)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("prediction channels must form a simplex")
    valid = classes != IGNORE
    if np.any(valid & (classes >= C)):
        raise ValueError(f"class labels must be < {C} or IGNORE")

    onehot = np.zeros((L, W, C))
    jx, jy = np.nonzero(valid)
    onehot[jx, jy, classes[jx, jy].astype(np.int64)] = 1.0
    if task == "cls":
        if mask is None:
            raise ValueError("cls task needs the occupied-cell mask")
        weight = onehot * np.asarray(mask, dtype=np.float64)[:, :, None]
        picked = engine.mul(_as_tensor(weight), engine.clamped_log(pred))
        focal = engine.power(engine.rsub_const(1.0, pred), cfg.focal_gamma)
        total = engine.sum_all(engine.mul(focal, picked))
    elif task == "gc":
        lam = np.where(classes == BACKGROUND, cfg.lambda_gc_background, cfg.lambda_gc_other)
        if mask is not None:
            lam = lam * np.asarray(mask, dtype=np.float64)
        weight = onehot * lam[:, :, None]
        total = engine.sum_all(engine.mul(_as_tensor(weight), engine.clamped_log(pred)))
    else:
        raise ValueError(f"unknown cross-entropy task {task!r}")
    return engine.mul_const(total, -1.0 / (L * W))


def total_loss(task_losses: dict, cfg: LossConfig) -> Tensor:
    """Alpha-weighted sum over the six tasks; missing tasks count as 0."""
    unknown = set(task_losses) - set(_TASK_ALPHAS)
    if unknown:
        raise ValueError(f"unknown task losses: {sorted(unknown)}")
    total: Tensor | None = None
    for task in _TASK_ALPHAS:
        if task not in task_losses:
            continue
        term = task_losses[task]
        if not isinstance(term, Tensor):
            term = _as_tensor(term)
        term = engine.scale(term, getattr(cfg, f"alpha_{task}"))
        total = term if total is None else engine.add(total, term)
    return total if total is not None else _as_tensor(0.0)


def frame_losses(output, labels: LabelSet, cfg: LossConfig) -> dict[str, Tensor]:
    """All six per-task losses for one frame's predictions and labels."""
    weights = task_weight_grids(labels, cfg)
    return {
        "occ": weighted_mse(output.y_occ, np.asarray(labels.occ, dtype=np.float64), weights["occ"]),
        "v": weighted_mse(output.y_v, np.asarray(labels.vel, dtype=np.float64), weights["v"]),
        "dyn": weighted_mse(output.y_dyn, np.asarray(labels.dyn, dtype=np.float64), weights["dyn"]),
        "road": weighted_mse(output.y_road, np.asarray(labels.road, dtype=np.float64), weights["road"]),
        "cls": weighted_ce_focal(output.y_cls, labels.sem, cfg, "cls", mask=weights["cls"]),
        "gc": weighted_ce_focal(output.y_gc, labels.gc, cfg, "gc"),
    }
