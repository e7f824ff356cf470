"""Scratch probe: measure costs before freezing acceptance-test constants."""
import os

for v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(v, "1")

import time

import numpy as np

from dogm import scene, train as tr, labels as lb, dataio as dio, losses
from dogm.bev import encode_core
from dogm.grid import GridSpec, Pose
from dogm.model import ModelConfig, Model, build_model, place_and_shift, forward_step, receptive_field_cells

# ---- probe A: criterion 6 forward cost at 782^2 f32 ----------------------
spec6 = GridSpec(782, 782, 0.15, 0.15, -0.2, 0.4, 0.2)
print("spec6 channels:", spec6.height_channels)
cfg6 = ModelConfig(782, 782, spec6.height_channels, (2, 4, 8, 128), 3, n_in=6, dropout=0.0)
print("rf:", receptive_field_cells(cfg6))
params6, model6 = build_model(cfg6, seed=1, dtype=np.float32)
rng = np.random.default_rng(0)
cells = rng.integers(0, 782, size=(4000, 2))
zc = rng.integers(0, spec6.height_channels, size=(4000, 1))
core = np.concatenate([cells, zc], axis=1)
state = model6.initial_state((0, 0), dtype=np.float32)
pose = Pose(0.0, 0.0, 0.0, 0.0)
bev, state = place_and_shift(core, pose, state, spec6)
t0 = time.perf_counter()
out, state = forward_step(model6, params6, bev, state, mode="infer", decode=False)
t1 = time.perf_counter()
out, state = forward_step(model6, params6, bev, state, mode="infer", decode=True)
t2 = time.perf_counter()
print(f"probe A 782^2 f32: nodecode {t1-t0:.2f}s decode {t2-t1:.2f}s -> 12 frames ~ {10*(t1-t0)+2*(t2-t1):.1f}s")

# ---- probe B: criterion 8 training cost -----------------------------------
TRAIN_SPEC = GridSpec(80, 80, 0.15, 0.15, -0.4, 1.2, 0.4)
print("train spec channels:", TRAIN_SPEC.height_channels)
SENSOR = scene.SensorConfig(rings=16, elevation_min_deg=-30.0, elevation_max_deg=8.0,
                            azimuth_step_deg=1.0, max_range=40.0)
scfg = scene.SceneConfig(
    frames=10, dt=0.1,
    vehicles=scene.CategoryConfig(2, 1, (1.2, 2.5)),
    large_vehicles=scene.CategoryConfig(0, 0, (0.0, 0.0)),
    pedestrians=scene.CategoryConfig(2, 2, (0.9, 1.4)),
    two_wheelers=scene.CategoryConfig(0, 0, (0.0, 0.0)),
    walls=4, arena_half_extent=5.5,
)
root = "/tmp/probe8"
os.makedirs(root, exist_ok=True)
t0 = time.perf_counter()
for s in range(3):
    sq = scene.generate_scene(scfg, seed=100 + s)
    clouds = scene.simulate_sequence(sq, SENSOR)
    raster = lb.rasterize_polygon(sq.driveable_polygon, 0.5)
    dio.write_sequence(sq, clouds, raster, TRAIN_SPEC, f"{root}/seq{s:02d}")
t1 = time.perf_counter()
print(f"probe B synth: {(t1-t0)/3:.2f}s per sequence")

mcfg = ModelConfig(80, 80, TRAIN_SPEC.height_channels, (6, 10, 14, 128), 3, n_in=3, dropout=0.1)
tcfg = tr.TrainConfig(n_in=3, supervised_steps=1, base_lr=3e-4, decay_interval=2000,
                      max_iterations=400, dropout=0.1, rotation_augmentation=False,
                      seed=0, checkpoint_interval=400)
t0 = time.perf_counter()
res = tr.train(root, mcfg, tcfg, "/tmp/probe8/out")
t1 = time.perf_counter()
print(f"probe B train: {(t1-t0)/400*1000:.0f} ms/iter -> 5000 iters ~ {(t1-t0)/400*5000/60:.1f} min")
rows = np.genfromtxt(res.log_path, delimiter=",", names=True)
occ = rows["occ"]
print("occ loss: first25 %.5f last25 %.5f ratio %.3f" % (occ[:25].mean(), occ[-25:].mean(), occ[-25:].mean() / occ[:25].mean()))
print("dyn loss: first25 %.5f last25 %.5f" % (rows["dyn"][:25].mean(), rows["dyn"][-25:].mean()))
print("cls loss: first25 %.5f last25 %.5f" % (rows["cls"][:25].mean(), rows["cls"][-25:].mean()))

# quick eval of the 400-iter model on scene 0 to sanity-check metric plumbing
from dogm.metrics import MetricsAccumulator
seq = dio.read_sequence(f"{root}/seq00")
tr.label_sequence(seq)
acc = MetricsAccumulator()
st = res.model.initial_state(
    __import__("dogm.model", fromlist=["pose_anchor"]).pose_anchor(seq.bundles[0].pose, seq.spec))
for k, b in enumerate(seq.bundles):
    cr = encode_core(b.cloud.xyz, b.pose, seq.spec)
    bev, st = place_and_shift(cr, b.pose, st, seq.spec)
    o, st = forward_step(res.model, res.params, bev, st, mode="infer", decode=k >= 2)
    if o is not None:
        a = o.arrays()
        acc.update(b.labels, vel=a["v"], dyn=a["dyn"], cls=a["cls"])
rep = acc.report()
print("after 400 iters: miou_dyn_static", rep.miou_dyn_static, "miou_sem", rep.miou_sem)
