"""
Forecasting the next pose from patch tracks
===========================================

Each patch observed over the last frames gives a 2D track.  Two cubic
splines per track (x and y against time) are extrapolated one frame ahead,
and a single-pose bundle adjustment against those predicted pixels gives
the forecast pose.  We compare with plain constant-velocity extrapolation.
"""

import numpy as np

from ramp_odo.forecast import constant_velocity, forecast_pose
from ramp_odo.geometry import Patch
from ramp_odo.patches import FrameRecord, PatchConfig, PatchGraph
from ramp_odo.synth import SceneSpec, make_dataset

spec = SceneSpec(kind="spline-waypoints", n_frames=60, seed=4)
ds = make_dataset(spec)
rng = np.random.default_rng(0)

# a window of 12 frames with ground-truth poses and exact patch projections
g = PatchGraph(PatchConfig(window_r=12))
for j in range(12):
    vis = np.flatnonzero(ds.render.visible[j])
    pick = rng.choice(vis, 8, replace=False)
    g.add_frame(FrameRecord(j, float(ds.timestamps[j]), ds.poses[j]),
                [Patch.around(j, g.new_patch_id(), ds.render.tracks[j, k], ds.render.inv_depth[j, k])
                 for k in pick])
    for P, k in zip(list(g.patches.values())[-8:], pick):
        P.point = k
for (pid, i), e in g.edges.items():
    e.projected = ds.render.tracks[i, g.patches[pid].point].copy()
    e.sigma = np.ones(2)

poses = {i: ds.poses[i] for i in g.window()}
t_next = float(ds.timestamps[12])
T_spline = forecast_pose(g, poses, spec.intrinsics, t_next)
dt = float(ds.timestamps[11] - ds.timestamps[10])
T_cv = constant_velocity(ds.poses[10], ds.poses[11], dt, dt)

truth = ds.poses[12]
step = np.linalg.norm(truth.t - ds.poses[11].t)
print(f"per-frame motion        {step:.5f}")
print(f"spline forecast error   {np.linalg.norm(T_spline.t - truth.t):.5f}")
print(f"constant-velocity error {np.linalg.norm(T_cv.t - truth.t):.5f}")
