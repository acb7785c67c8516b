import numpy as np
import pytest

from ramp_odo.ba import BaProblem
from ramp_odo.geometry import Intrinsics, Patch, Se3Pose, normalize_pixels


def random_pose(rng, trans=0.2, rot=0.1):
    return Se3Pose.exp(np.concatenate([rng.normal(0, trans, 3), rng.normal(0, rot, 3)]))


def random_intrinsics(rng):
    f = rng.uniform(150, 400)
    return Intrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(140, 180), rng.uniform(100, 140))


def project_world(points, T, K):
    Xc = (points - T.t) @ T.R
    return np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], -1), Xc[:, 2]


def two_frame_problem(rng, n_patches=8, K=None):
    """Frame 0 at identity, frame 1 displaced; targets are exact projections.

    Returns (problem with frame 1 at ground truth, ground-truth poses)."""
    K = K or Intrinsics(200.0, 200.0, 160.0, 120.0)
    T0 = Se3Pose.identity()
    T1 = Se3Pose.exp(np.r_[rng.normal(0, 0.1, 3), rng.normal(0, 0.03, 3)])
    centers = rng.uniform([40, 40], [280, 200], (n_patches, 2))
    depth = rng.uniform(0.2, 0.5, n_patches)
    uv = normalize_pixels(K, centers)
    X = np.c_[uv, np.ones(n_patches)] / depth[:, None]
    target, z = project_world(X, T1, K)
    assert np.all(z > 0)
    prob = BaProblem([T0, T1], depth, centers, np.zeros(n_patches), np.arange(n_patches),
                     np.ones(n_patches), target, np.ones((n_patches, 2)), K, n_fixed=1,
                     depth_fixed=np.ones(n_patches, bool))
    return prob, [T0, T1]


def random_ba_problem(rng, n_frames=4, n_patches=12, n_fixed=1):
    """Random multi-frame problem without self edges."""
    K = Intrinsics(200.0, 200.0, 160.0, 120.0)
    poses = [Se3Pose.identity()] + [random_pose(rng, 0.05, 0.02) for _ in range(n_frames - 1)]
    centers = rng.uniform([40, 40], [280, 200], (n_patches, 2))
    pf = rng.integers(0, n_frames, n_patches)
    ek, ei = [], []
    for k in range(n_patches):
        for i in range(n_frames):
            if i != pf[k]:
                ek.append(k)
                ei.append(i)
    ek, ei = np.array(ek), np.array(ei)
    target = rng.uniform([0, 0], [320, 240], (len(ek), 2))
    weight = rng.uniform(0.2, 2.0, (len(ek), 2))
    return BaProblem(poses, rng.uniform(0.1, 0.5, n_patches), centers, pf, ek, ei, target, weight, K,
                     n_fixed=n_fixed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ground_truth_graph(spec, n_hist, n_per_frame=8, seed=0):
    """Patch graph over frames ``0..n_hist-1`` of a synthetic scene whose
    edges carry exact projections.  Returns (graph, poses, dataset)."""
    from ramp_odo.patches import FrameRecord, PatchConfig, PatchGraph
    from ramp_odo.synth import make_dataset

    ds = make_dataset(spec)
    g = PatchGraph(PatchConfig(window_r=max(12, n_hist)))
    r = np.random.default_rng(seed)
    for j in range(n_hist):
        vis = np.flatnonzero(ds.render.visible[j])
        pick = r.choice(vis, n_per_frame, replace=False)
        ps = [Patch.around(j, g.new_patch_id(), ds.render.tracks[j, k], ds.render.inv_depth[j, k])
              for k in pick]
        for P, k in zip(ps, pick):
            P.point = k
        g.add_frame(FrameRecord(j, float(ds.timestamps[j]), ds.poses[j]), ps)
    for (pid, i), e in g.edges.items():
        k = g.patches[pid].point
        e.projected = ds.render.tracks[i, k].copy()
        e.sigma = np.ones(2)
    poses = {i: ds.poses[i] for i in g.window()}
    return g, poses, ds


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def emit(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
