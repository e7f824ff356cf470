"""Scratch probe: full-size criterion-8 run with the exact candidate constants."""
import os

for v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(v, "1")

import shutil
import time

import numpy as np

from dogm import dataio as dio, labels as lb, scene, train as tr
from dogm.bev import encode_core
from dogm.grid import GridSpec
from dogm.metrics import MetricsAccumulator, format_report
from dogm.model import ModelConfig, build_model, forward_step, place_and_shift, pose_anchor

TRAIN_SPEC = GridSpec(80, 80, 0.15, 0.15, -0.4, 1.2, 0.4)
SENSOR = scene.SensorConfig(rings=16, elevation_min_deg=-30.0, elevation_max_deg=8.0,
                            azimuth_step_deg=1.0, max_range=40.0)
SCENE = scene.SceneConfig(
    frames=10, dt=0.1,
    vehicles=scene.CategoryConfig(2, 1, (1.2, 2.5)),
    large_vehicles=scene.CategoryConfig(0, 0, (0.0, 0.0)),
    pedestrians=scene.CategoryConfig(2, 2, (0.9, 1.4)),
    two_wheelers=scene.CategoryConfig(0, 0, (0.0, 0.0)),
    walls=4, arena_half_extent=5.5,
)

root = "/tmp/full8"
shutil.rmtree(root, ignore_errors=True)
os.makedirs(root)
t0 = time.perf_counter()
for s in range(20):
    sq = scene.generate_scene(SCENE, seed=52100 + s)
    clouds = scene.simulate_sequence(sq, SENSOR)
    raster = lb.rasterize_polygon(sq.driveable_polygon, 0.5)
    dio.write_sequence(sq, clouds, raster, TRAIN_SPEC, f"{root}/seq{s:02d}")
print(f"synth: {time.perf_counter()-t0:.1f}s", flush=True)

mcfg = ModelConfig(80, 80, TRAIN_SPEC.height_channels, (6, 10, 14, 128), 3, n_in=3, dropout=0.1)
tcfg = tr.TrainConfig(n_in=3, supervised_steps=1, base_lr=3e-4, decay_interval=2000,
                      max_iterations=5000, dropout=0.1, rotation_augmentation=False,
                      seed=52008, checkpoint_interval=5000)
t0 = time.perf_counter()
res = tr.train(root, mcfg, tcfg, f"{root}/run")
train_s = time.perf_counter() - t0
print(f"train: {train_s:.0f}s ({train_s/5000*1000:.0f} ms/iter)", flush=True)

log = np.genfromtxt(res.log_path, delimiter=",", names=True)
occ = log["occ"]
print(f"occ first25 {occ[:25].mean():.5f} last25 {occ[-25:].mean():.5f} "
      f"ratio {occ[-25:].mean()/occ[:25].mean():.4f}")
for col in ("v", "dyn", "cls", "gc", "road"):
    print(f"{col}: first25 {log[col][:25].mean():.5f} last25 {log[col][-25:].mean():.5f}")

t0 = time.perf_counter()
acc = MetricsAccumulator()
for s in range(20):
    seq = dio.read_sequence(f"{root}/seq{s:02d}")
    tr.label_sequence(seq)
    state = res.model.initial_state(pose_anchor(seq.bundles[0].pose, seq.spec))
    for k, b in enumerate(seq.bundles):
        core = encode_core(b.cloud.xyz, b.pose, seq.spec)
        bev, state = place_and_shift(core, b.pose, state, seq.spec)
        out, state = forward_step(res.model, res.params, bev, state,
                                  mode="infer", decode=k >= tcfg.n_in - 1)
        if out is not None:
            arr = out.arrays()
            acc.update(b.labels, vel=arr["v"], dyn=arr["dyn"], cls=arr["cls"])
rep = acc.report()
print(f"eval: {time.perf_counter()-t0:.1f}s")
print(format_report(rep))
print("miou_dyn_static", rep.miou_dyn_static, "miou_sem", rep.miou_sem)
