import numpy as np
import pytest

from conftest import random_ba_problem, two_frame_problem
from ramp_odo.ba import (BaProblem, InvalidProblemError, LmConfig, lm_solve, normal_equations,
                         residuals, schur_step, total_cost)
from ramp_odo.geometry import Intrinsics, Patch, Se3Pose, jacobians, project_patch


def dense_system(prob):
    """Reference normal equations from per-edge Jacobians, assembled densely."""
    n_poses, n_dep = len(prob.poses), len(prob.inv_depths)
    free = list(range(prob.n_fixed, n_poses))
    col = {p: 6 * n for n, p in enumerate(free)}
    nv = 6 * len(free) + n_dep
    J = np.zeros((2 * prob.n_edges, nv))
    r = np.zeros(2 * prob.n_edges)
    w = np.zeros(2 * prob.n_edges)
    for e, (k, i) in enumerate(zip(prob.edge_patch, prob.edge_frame)):
        j = prob.patch_frame[k]
        P = Patch.around(j, k, prob.centers[k], prob.inv_depths[k])
        Ji, Jj, Jd = jacobians(prob.poses[i], prob.poses[j], prob.K, P)
        rows = slice(2 * e, 2 * e + 2)
        if i in col:
            J[rows, col[i]:col[i] + 6] += Ji
        if j in col:
            J[rows, col[j]:col[j] + 6] += Jj
        J[rows, 6 * len(free) + k] = Jd[:, 0]
        r[rows] = prob.target[e] - project_patch(prob.poses[i], prob.poses[j], prob.K, P).center
        w[rows] = prob.weight[e]
    return J.T @ (w[:, None] * J), J.T @ (w * r), 6 * len(free)


@pytest.mark.parametrize("seed", range(20))
def test_schur_matches_dense_damped_solve(seed):
    rng = np.random.default_rng(seed)
    prob = random_ba_problem(rng, n_frames=int(rng.integers(3, 6)), n_patches=int(rng.integers(6, 15)))
    H, g, n6 = dense_system(prob)
    ne = normal_equations(prob)
    np.testing.assert_allclose(ne.B, H[:n6, :n6], rtol=1e-9, atol=1e-9 * np.abs(H).max())
    for lam in (1e-4, 1e-1, 10.0):
        x = np.linalg.solve(H + lam * np.diag(np.diag(H)), g)
        dxi, dd = schur_step(ne, lam)
        y = np.concatenate([dxi.ravel(), dd])
        assert np.linalg.norm(x - y) / np.linalg.norm(x) < 1e-8


def test_cost_definitions(rng):
    K = Intrinsics(200.0, 200.0, 160.0, 120.0)
    prob, _ = two_frame_problem(rng)
    assert total_cost(prob) < 1e-18
    one = BaProblem([Se3Pose.identity(), Se3Pose.identity()], [0.5], [[100.0, 80.0]], [0], [0], [1],
                    [[101.0, 82.0]], [[2.0, 3.0]], K)
    assert total_cost(one) == pytest.approx(14.0, abs=1e-9)
    rand = random_ba_problem(rng)
    naive = 0.0
    for e, (k, i) in enumerate(zip(rand.edge_patch, rand.edge_frame)):
        P = Patch.around(0, k, rand.centers[k], rand.inv_depths[k])
        c = project_patch(rand.poses[i], rand.poses[rand.patch_frame[k]], K, P).center
        naive += np.sum(rand.weight[e] * (rand.target[e] - c) ** 2)
    assert total_cost(rand) == pytest.approx(naive, rel=1e-12)


def test_zero_residual_problem_accepts_zero_steps(rng):
    prob, gt = two_frame_problem(rng)
    poses, depths, rep = lm_solve(prob, LmConfig(steps=2))
    assert rep.accepted == [True, True] and rep.costs[-1] < 1e-20
    np.testing.assert_allclose(poses[1].matrix(), gt[1].matrix(), atol=1e-12)


def test_nan_residual_is_invalid(rng):
    prob = random_ba_problem(rng)
    prob.target[0, 0] = np.nan
    with pytest.raises(InvalidProblemError):
        residuals(prob)
    with pytest.raises(InvalidProblemError):
        BaProblem(prob.poses, prob.inv_depths, prob.centers, prob.patch_frame, prob.edge_patch,
                  prob.edge_frame, prob.target, -np.ones_like(prob.weight), prob.K)


def test_singular_system_is_rejected_not_raised(rng):
    prob, gt = two_frame_problem(rng)
    # x-only weights: the y-translation column of the target pose is identically zero
    prob.weight[:] = [1.0, 0.0]
    prob = prob.with_state([gt[0], gt[1].retract(np.full(6, 0.01))], prob.inv_depths)
    poses, _, rep = lm_solve(prob, LmConfig(steps=2))
    assert rep.accepted == [False, False]
    assert len(rep.diagnostics) == 2 and "not positive definite" in rep.diagnostics[0]
    np.testing.assert_array_equal(poses[1].matrix(), prob.poses[1].matrix())


@pytest.mark.parametrize("seed", range(5))
def test_two_frame_recovery(seed):
    rng = np.random.default_rng(100 + seed)
    prob, gt = two_frame_problem(rng)
    xi = rng.normal(size=6)
    start = prob.with_state([gt[0], gt[1].retract(0.05 * xi / np.linalg.norm(xi))], prob.inv_depths)
    poses, _, rep = lm_solve(start, LmConfig(steps=12))
    err = np.linalg.norm((gt[1].inverse() @ poses[1]).log())
    assert err < 1e-6
    acc = np.array(rep.accepted)
    costs = np.array(rep.costs)
    assert np.all(costs[1:][acc] < costs[:-1][acc] + (costs[:-1][acc] == 0))


def test_fixed_poses_stay_fixed(rng):
    prob = random_ba_problem(rng, n_frames=4, n_fixed=2)
    poses, _, _ = lm_solve(prob, LmConfig(steps=3))
    for a, b in zip(poses[:2], prob.poses[:2]):
        np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_lm_never_increases_cost(rng):
    for _ in range(5):
        prob = random_ba_problem(rng)
        _, _, rep = lm_solve(prob, LmConfig(steps=6))
        assert np.all(np.diff(rep.costs) <= 0)
