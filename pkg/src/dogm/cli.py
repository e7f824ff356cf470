"""Command-line workflow around the library: synthesize a scene, cache BEV
tensors, run the classical baseline, label, train, infer, evaluate, render.

Every subcommand is a thin orchestration layer over the library modules and
is deterministic given its ``--seed``.  Configuration precedence is flags >
config file > built-in defaults.  Exit status is 0 exactly when all
requested outputs were written; usage errors exit 2 (argparse) and runtime
failures print one line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from . import dataio as dio
from .bev import encode_core
from .engine import NumericFault, Tensor
from .grid import DESK_GRID, GridSpec, height_channel_count
from .ism import measurement_grid
from .labels import rasterize_polygon
from .metrics import OCC_VALIDITY, MetricsAccumulator, format_report, metrics_csv
from .model import (
    Model,
    ModelConfig,
    forward_step,
    place_and_shift,
    pose_anchor,
    read_model_config,
    write_model_config,
)
from .scene import (
    DESK_SENSOR,
    CategoryConfig,
    SceneConfig,
    SensorConfig,
    generate_scene,
    simulate_sequence,
)
from .train import (
    TrainConfig,
    label_sequence,
    load_checkpoint,
    read_train_config,
    train,
    write_train_config,
)

_CATEGORIES = ("vehicles", "large_vehicles", "pedestrians", "two_wheelers")


# ---------------------------------------------------------------------------
# config files


def _pop_typed(kv: dict, key: str, default):
    """Fetch ``key`` coerced to the type of ``default`` (which it replaces)."""
    if key not in kv:
        return default
    value = kv.pop(key)
    kind = type(default)
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r} expects {kind.__name__}, got {value!r}")


def _grid_from_kv(kv: dict, base: GridSpec) -> GridSpec:
    return GridSpec(
        **{f.name: _pop_typed(kv, f"grid.{f.name}", getattr(base, f.name)) for f in fields(GridSpec)}
    )


def read_scene_config(path: str | None):
    """Scene/sensor/grid settings for ``synth`` from one key-value file.

    Keys are dotted by section: plain scene fields (``frames``, ``dt``,
    ``walls``, ...), per-category ``vehicles.count`` / ``.static_count`` /
    ``.speed_min`` / ``.speed_max``, plus ``sensor.*`` and ``grid.*``
    fields.  ``raster_resolution`` sets the driveable-raster pixel size.
    Unknown keys are rejected so typos cannot silently fall back to
    defaults.
    """
    scene_cfg, sensor, spec = SceneConfig(), DESK_SENSOR, DESK_GRID
    resolution = min(spec.cell_length, spec.cell_width)
    if path is None:
        return scene_cfg, sensor, spec, resolution
    kv = dio.read_kv_file(path)

    categories = {}
    for name in _CATEGORIES:
        base: CategoryConfig = getattr(scene_cfg, name)
        lo = _pop_typed(kv, f"{name}.speed_min", base.speed_range[0])
        hi = _pop_typed(kv, f"{name}.speed_max", base.speed_range[1])
        categories[name] = CategoryConfig(
            count=_pop_typed(kv, f"{name}.count", base.count),
            static_count=_pop_typed(kv, f"{name}.static_count", base.static_count),
            speed_range=(lo, hi),
        )
    plain = {
        f.name: _pop_typed(kv, f.name, getattr(scene_cfg, f.name))
        for f in fields(SceneConfig)
        if f.name not in _CATEGORIES
    }
    scene_cfg = SceneConfig(**plain, **categories)
    sensor = SensorConfig(
        **{f.name: _pop_typed(kv, f"sensor.{f.name}", getattr(sensor, f.name)) for f in fields(SensorConfig)}
    )
    spec = _grid_from_kv(kv, spec)
    resolution = _pop_typed(kv, "raster_resolution", min(spec.cell_length, spec.cell_width))
    if kv:
        raise ValueError(f"{path}: unknown config keys {sorted(kv)}")
    return scene_cfg, sensor, spec, resolution


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    scene_cfg, sensor, spec, resolution = read_scene_config(args.config)
    if args.frames is not None:
        scene_cfg = replace(scene_cfg, frames=args.frames)
    seq = generate_scene(scene_cfg, args.seed)
    clouds = simulate_sequence(seq, sensor)
    raster = rasterize_polygon(seq.driveable_polygon, resolution)
    manifest = dio.write_sequence(seq, clouds, raster, spec, args.out)
    print(f"synthesized {seq.frames} frames -> {manifest}")
    return 0


def _read_spec_override(path: str | None, stored: GridSpec) -> GridSpec:
    if path is None:
        return stored
    kv = dio.read_kv_file(path)
    spec = _grid_from_kv(kv, stored)
    kv_rest = {k: v for k, v in kv.items() if not k.startswith("grid.")}
    if kv_rest:
        raise ValueError(f"{path}: unknown config keys {sorted(kv_rest)}")
    return spec


def _cmd_encode(args) -> int:
    seq = dio.read_sequence(args.in_dir)
    spec = _read_spec_override(args.spec, seq.spec)
    out = args.out or os.path.join(args.in_dir, "bev")
    os.makedirs(out, exist_ok=True)
    for k, bundle in enumerate(seq.bundles):
        cells = encode_core(bundle.cloud.xyz, bundle.pose, spec)
        dio.write_tensor_bundle(
            os.path.join(out, f"bev_{k:06d}.bin"), {"cells": cells.astype(np.int64)}
        )
    print(f"encoded {len(seq.bundles)} frames -> {out}")
    return 0


def _cmd_ism(args) -> int:
    seq = dio.read_sequence(args.in_dir)
    out = args.out or os.path.join(args.in_dir, "ism")
    os.makedirs(out, exist_ok=True)
    for k, bundle in enumerate(seq.bundles):
        grid = measurement_grid(bundle.cloud, bundle.pose, seq.spec)
        dio.write_tensor_bundle(
            os.path.join(out, f"ism_{k:06d}.bin"), {"states": grid.states}
        )
        with open(os.path.join(out, f"ism_{k:06d}.pgm"), "wb") as fh:
            fh.write(dio.render_grid("occupancy", grid.probabilities()))
    print(f"ray-cast {len(seq.bundles)} measurement grids -> {out}")
    return 0


def _cmd_labels(args) -> int:
    seq = dio.read_sequence(args.in_dir)
    label_sequence(seq)
    render_dir = os.path.join(args.in_dir, "renders")
    os.makedirs(render_dir, exist_ok=True)
    for k, bundle in enumerate(seq.bundles):
        dio.write_labels(bundle.labels, args.in_dir, k)
        lab = bundle.labels
        renders = {
            f"labels_occupancy_{k:06d}.pgm": dio.render_grid("occupancy", lab.occ),
            f"labels_velocity_{k:06d}.ppm": dio.render_grid("velocity", lab.vel, lab.dyn == 1),
            f"labels_semantics_{k:06d}.ppm": dio.render_grid("semantics", lab.sem),
            f"labels_driveable_{k:06d}.ppm": dio.render_grid("occupancy_road", lab.occ, lab.road),
        }
        for name, blob in renders.items():
            with open(os.path.join(render_dir, name), "wb") as fh:
                fh.write(blob)
    print(f"labeled {len(seq.bundles)} frames -> {args.in_dir} (renders in {render_dir})")
    return 0


def _default_model_config(seq) -> ModelConfig:
    spec = seq.spec
    return ModelConfig(
        length_cells=spec.length_cells,
        width_cells=spec.width_cells,
        input_channels=height_channel_count(spec.height_min, spec.height_max, spec.cell_height),
    )


def _cmd_train(args) -> int:
    seq = dio.read_sequence(_first_sequence_dir(args.data))
    model_cfg = read_model_config(args.model_config) if args.model_config else _default_model_config(seq)
    train_cfg = read_train_config(args.train_config) if args.train_config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["max_iterations"] = args.iterations
    if overrides:
        train_cfg = replace(train_cfg, **overrides)

    result = train(args.data, model_cfg, train_cfg, args.out, resume=args.resume)

    effective = replace(model_cfg, n_in=train_cfg.n_in, dropout=train_cfg.dropout)
    write_model_config(effective, os.path.join(args.out, "model.cfg"))
    write_train_config(train_cfg, os.path.join(args.out, "train.cfg"))
    deploy = os.path.join(args.out, "model.ckpt")
    dio.write_checkpoint(
        {name: p.data.astype(np.float32) for name, p in result.params.items()}, deploy
    )
    print(
        f"trained {result.iterations} iterations -> {result.checkpoints[-1]}"
        f" (deployable {deploy}, log {result.log_path})"
    )
    return 0


def _first_sequence_dir(root: str) -> str:
    if os.path.exists(os.path.join(root, "manifest.txt")):
        return root
    for name in sorted(os.listdir(root)):
        if os.path.exists(os.path.join(root, name, "manifest.txt")):
            return os.path.join(root, name)
    raise ValueError(f"{root}: no sequence manifest found")


def _load_inference_model(checkpoint: str, config_path: str | None):
    """Model plus parameters from either checkpoint flavor.

    ``.npz`` files are trainer bundles (float64 with optimizer moments);
    anything else is read as the float32 deployable format.  The model
    config comes from ``--model-config`` or a ``model.cfg`` next to the
    checkpoint.
    """
    if config_path is None:
        sibling = os.path.join(os.path.dirname(checkpoint) or ".", "model.cfg")
        if not os.path.exists(sibling):
            raise ValueError(
                f"no model config: pass --model-config or keep model.cfg beside {checkpoint}"
            )
        config_path = sibling
    config = read_model_config(config_path)
    model = Model(config)
    shapes = model.parameter_shapes()
    if checkpoint.endswith(".npz"):
        params, _, _ = load_checkpoint(checkpoint)
        for name, shape in shapes.items():
            if name not in params or params[name].data.shape != shape:
                raise ValueError(f"{checkpoint}: checkpoint does not match the model config ({name})")
    else:
        arrays = dio.read_checkpoint(checkpoint, expected=shapes)
        params = {
            name: Tensor(arr, requires_grad=False, name=name) for name, arr in arrays.items()
        }
    return model, params


def _cmd_infer(args) -> int:
    seq = dio.read_sequence(args.data)
    model, params = _load_inference_model(args.checkpoint, args.model_config)
    spec = seq.spec
    if (spec.length_cells, spec.width_cells) != (
        model.config.length_cells,
        model.config.width_cells,
    ):
        raise ValueError(
            f"sequence grid {spec.length_cells}x{spec.width_cells} does not match "
            f"model {model.config.length_cells}x{model.config.width_cells}"
        )
    out = args.out or os.path.join(args.data, "pred")
    os.makedirs(out, exist_ok=True)
    dtype = next(iter(params.values())).data.dtype
    state = model.initial_state(pose_anchor(seq.bundles[0].pose, spec), dtype=dtype)

    latencies = []
    if args.stream:
        # one frame in flight: encode, place, step, write, keep only state
        for k, bundle in enumerate(seq.bundles):
            start = time.perf_counter()
            core = encode_core(bundle.cloud.xyz, bundle.pose, spec)
            placed, state = place_and_shift(core, bundle.pose, state, spec)
            output, state = forward_step(model, params, placed, state)
            dio.write_tensor_bundle(
                os.path.join(out, f"output_{k:06d}.bin"), output.arrays()
            )
            latencies.append(time.perf_counter() - start)
    else:
        cores = [encode_core(b.cloud.xyz, b.pose, spec) for b in seq.bundles]
        for k, bundle in enumerate(seq.bundles):
            start = time.perf_counter()
            placed, state = place_and_shift(cores[k], bundle.pose, state, spec)
            output, state = forward_step(model, params, placed, state)
            dio.write_tensor_bundle(
                os.path.join(out, f"output_{k:06d}.bin"), output.arrays()
            )
            latencies.append(time.perf_counter() - start)

    with open(os.path.join(out, "latency.csv"), "w", encoding="utf-8") as fh:
        fh.write("frame,seconds\n")
        for k, dt in enumerate(latencies):
            fh.write(f"{k},{dt:.6f}\n")
    mode = "streamed" if args.stream else "ran"
    print(f"{mode} {len(seq.bundles)} frames -> {out} (median {np.median(latencies) * 1e3:.1f} ms)")
    return 0


def _cmd_eval(args) -> int:
    seq = dio.read_sequence(args.data)
    label_sequence(seq)
    acc = MetricsAccumulator()
    evaluated = 0
    for k, bundle in enumerate(seq.bundles):
        path = os.path.join(args.pred, f"output_{k:06d}.bin")
        if not os.path.exists(path):
            continue
        tensors = dio.read_tensor_bundle(path)
        acc.update(
            bundle.labels,
            vel=tensors.get("v"),
            dyn=tensors.get("dyn"),
            cls=tensors.get("cls"),
        )
        evaluated += 1
    if not evaluated:
        raise ValueError(f"{args.pred}: no output_NNNNNN.bin predictions found")
    report = acc.report()
    out = args.out or os.path.join(args.pred, "metrics.csv")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(metrics_csv(report))
    print(f"evaluated {evaluated}/{len(seq.bundles)} frames -> {out}")
    print(format_report(report))
    return 0


_LAYERS = ("occupancy", "velocity", "semantics", "driveable")


def _render_from_labels(t: dict, layer: str) -> bytes:
    if layer == "occupancy":
        return dio.render_grid("occupancy", t["occ"])
    if layer == "velocity":
        return dio.render_grid("velocity", t["vel"], t["dyn"] == 1)
    if layer == "semantics":
        return dio.render_grid("semantics", t["sem"])
    return dio.render_grid("occupancy_road", t["occ"], t["road"])


def _render_from_outputs(t: dict, layer: str) -> bytes:
    if layer == "occupancy":
        return dio.render_grid("occupancy", t["occ"])
    if layer == "velocity":
        return dio.render_grid("velocity", t["v"], t["occ"] > OCC_VALIDITY)
    if layer == "semantics":
        return dio.render_grid("semantics", t["cls"].argmax(axis=2).astype(np.uint8))
    return dio.render_grid("occupancy_road", t["occ"], (t["road"] >= 0.5).astype(np.uint8))


def _cmd_render(args) -> int:
    sources = (
        ("labels", "labels_{:06d}.bin", _render_from_labels),
        ("pred", "output_{:06d}.bin", _render_from_outputs),
        ("ism", "ism_{:06d}.bin", None),
    )
    if args.kind:
        sources = [s for s in sources if s[0] == args.kind]
    chosen = None
    for kind, pattern, renderer in sources:
        if os.path.exists(os.path.join(args.in_dir, pattern.format(0))):
            chosen = (kind, pattern, renderer)
            break
    if chosen is None:
        raise ValueError(f"{args.in_dir}: no renderable bundles found")
    kind, pattern, renderer = chosen
    if kind == "ism" and args.layer != "occupancy":
        raise ValueError("measurement grids only render the occupancy layer")

    out = args.out or os.path.join(args.in_dir, "renders")
    os.makedirs(out, exist_ok=True)
    ext = "pgm" if args.layer == "occupancy" else "ppm"
    count = 0
    frames = [args.frame] if args.frame is not None else range(10**6)
    for k in frames:
        path = os.path.join(args.in_dir, pattern.format(k))
        if not os.path.exists(path):
            if args.frame is not None:
                raise ValueError(f"{path}: frame bundle missing")
            break
        tensors = dio.read_tensor_bundle(path)
        if kind == "ism":
            blob = dio.render_grid("occupancy", np.array([0.5, 0.0, 1.0])[tensors["states"]])
        else:
            blob = renderer(tensors, args.layer)
        with open(os.path.join(out, f"{kind}_{args.layer}_{k:06d}.{ext}"), "wb") as fh:
            fh.write(blob)
        count += 1
    print(f"rendered {count} {args.layer} images from {kind} bundles -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dogm",
        description="Desk-scale dynamic occupancy grid mapping workflow.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and simulate a synthetic scene")
    p.add_argument("--config", help="scene/sensor/grid key-value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, help="override the configured frame count")
    p.add_argument("--out", required=True, help="sequence directory to create")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("encode", help="cache BEV cell indices per frame")
    p.add_argument("--in", dest="in_dir", required=True, help="sequence directory")
    p.add_argument("--spec", help="grid.* key-value file overriding the stored grid")
    p.add_argument("--out", help="cache directory (default <in>/bev)")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("ism", help="classical measurement grids plus renders")
    p.add_argument("--in", dest="in_dir", required=True, help="sequence directory")
    p.add_argument("--out", help="output directory (default <in>/ism)")
    p.set_defaults(func=_cmd_ism)

    p = sub.add_parser("labels", help="generate label sets plus renders")
    p.add_argument("--in", dest="in_dir", required=True, help="sequence directory")
    p.set_defaults(func=_cmd_labels)

    p = sub.add_parser("train", help="train the recurrent multi-task network")
    p.add_argument("--data", required=True, help="sequence directory or directory of sequences")
    p.add_argument("--model-config", help="model key-value file (default: sized to the data)")
    p.add_argument("--train-config", help="trainer key-value file (default: built-in)")
    p.add_argument("--seed", type=int, help="override the trainer seed")
    p.add_argument("--iterations", type=int, help="override max_iterations")
    p.add_argument("--resume", help="trainer checkpoint (.npz) to continue from")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run the network over a sequence")
    p.add_argument("--checkpoint", required=True, help=".npz trainer bundle or float32 deployable")
    p.add_argument("--model-config", help="model key-value file (default: model.cfg beside the checkpoint)")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--stream", action="store_true", help="one frame in flight, state threaded")
    p.add_argument("--out", help="prediction directory (default <data>/pred)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against labels")
    p.add_argument("--pred", required=True, help="prediction directory from infer")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--out", help="metrics CSV path (default <pred>/metrics.csv)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="render stored bundles to PGM/PPM images")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of label/output/ism bundles")
    p.add_argument("--layer", required=True, choices=_LAYERS)
    p.add_argument("--kind", choices=("labels", "pred", "ism"), help="bundle kind if mixed")
    p.add_argument("--frame", type=int, help="single frame (default: all)")
    p.add_argument("--out", help="image directory (default <in>/renders)")
    p.set_defaults(func=_cmd_render)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, NumericFault) as exc:
        print(f"dogm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
