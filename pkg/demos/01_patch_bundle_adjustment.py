"""
Patch bundle adjustment on two frames
=====================================

A handful of 3x3 patches live in frame 0 with known inverse depth.  Their
exact projections into frame 1 are the targets; frame 1 starts from a
perturbed pose and a few Levenberg-Marquardt steps pull it back.
"""

import numpy as np

from ramp_odo.ba import BaProblem, LmConfig, lm_solve
from ramp_odo.geometry import Intrinsics, Se3Pose, normalize_pixels

rng = np.random.default_rng(0)
K = Intrinsics(200.0, 200.0, 160.0, 120.0)

# ground truth: frame 0 at the origin, frame 1 slightly moved and turned
T0 = Se3Pose.identity()
T1 = Se3Pose.exp([0.08, -0.02, 0.05, 0.01, -0.02, 0.005])

# patch centers and inverse depths in frame 0, lifted to world points
n = 12
centers = rng.uniform([40, 40], [280, 200], (n, 2))
inv_depth = rng.uniform(0.2, 0.5, n)
X = np.c_[normalize_pixels(K, centers), np.ones(n)] / inv_depth[:, None]

# where those points land in frame 1
Xc = (X - T1.t) @ T1.R
target = np.c_[K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy]

# start frame 1 from a wrong pose; frame 0 anchors the gauge
start = T1.retract(0.05 * rng.normal(size=6))
prob = BaProblem([T0, start], inv_depth, centers, np.zeros(n), np.arange(n), np.ones(n),
                 target, np.ones((n, 2)), K, n_fixed=1, depth_fixed=np.ones(n, bool))

poses, _, rep = lm_solve(prob, LmConfig(steps=12))
for k, (c, ok) in enumerate(zip(rep.costs[1:], rep.accepted)):
    print(f"step {k:2d}  cost {c:.3e}  {'accepted' if ok else 'rejected'}")

err = np.linalg.norm((T1.inverse() @ poses[1]).log())
print(f"pose error before {np.linalg.norm((T1.inverse() @ start).log()):.3e}, after {err:.3e}")
