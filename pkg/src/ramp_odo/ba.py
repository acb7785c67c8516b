"""Sliding-window weighted bundle adjustment over poses and patch inverse
depths, solved with damped Gauss-Newton (Levenberg-Marquardt) steps and a
Schur complement that eliminates the scalar depth blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .geometry import Intrinsics, Se3Pose, center_jacobians, warp_centers


class InvalidProblemError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    steps: int = 2
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_bounds: tuple = (1e-8, 1e4)
    depth_bounds: tuple = (1e-4, 10.0)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (self.lambda_bounds[0] <= self.lambda_init <= self.lambda_bounds[1]):
            raise ValueError("lambda_init outside lambda_bounds")
        if not self.depth_bounds[0] < self.depth_bounds[1]:
            raise ValueError("depth_bounds must be ordered")


@dataclass
class BaProblem:
    """Edges reference poses and patches by position in ``poses``/``inv_depths``.

    ``target`` is the corrected observation ``P' + delta`` of each edge and
    ``weight`` the diagonal of its 2x2 weight matrix.  The first ``n_fixed``
    poses are held constant.
    """

    poses: list
    inv_depths: np.ndarray
    centers: np.ndarray        # (n_patches, 2) source pixel of each patch center
    patch_frame: np.ndarray    # (n_patches,) pose index of the source frame
    edge_patch: np.ndarray     # (E,)
    edge_frame: np.ndarray     # (E,)
    target: np.ndarray         # (E, 2)
    weight: np.ndarray         # (E, 2)
    K: Intrinsics
    n_fixed: int = 2
    depth_fixed: np.ndarray | None = None

    def __post_init__(self):
        self.inv_depths = np.asarray(self.inv_depths, dtype=float)
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.patch_frame = np.asarray(self.patch_frame, dtype=np.int64)
        self.edge_patch = np.asarray(self.edge_patch, dtype=np.int64)
        self.edge_frame = np.asarray(self.edge_frame, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=float).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=float).reshape(-1, 2)
        if np.any(self.weight < 0):
            raise InvalidProblemError("edge weights must be nonnegative")
        if self.depth_fixed is None:
            self.depth_fixed = np.zeros(len(self.inv_depths), bool)

    @property
    def n_edges(self):
        return len(self.edge_patch)

    def with_state(self, poses, inv_depths):
        return replace(self, poses=list(poses), inv_depths=np.asarray(inv_depths, dtype=float))


def _pose_arrays(poses):
    R = np.stack([T.R for T in poses])
    t = np.stack([T.t for T in poses])
    return R, t


def project_edges(problem: BaProblem):
    """Current center projections of every edge; returns (proj, valid, X, RG, tG)."""
    R, t = _pose_arrays(problem.poses)
    i, k = problem.edge_frame, problem.edge_patch
    j = problem.patch_frame[k]
    return warp_centers(R[i], t[i], R[j], t[j], problem.K, problem.centers[k], problem.inv_depths[k])


def residuals(problem: BaProblem):
    """Residuals ``target - projection`` with the validity mask."""
    proj, valid, *_ = project_edges(problem)
    r = problem.target - proj
    if np.any(~np.isfinite(r[valid])):
        raise InvalidProblemError("non-finite residual")
    return np.where(valid[:, None], r, 0.0), valid


def total_cost(problem: BaProblem) -> float:
    r, valid = residuals(problem)
    w = problem.weight * valid[:, None]
    return float(np.sum(w * r * r))


@dataclass
class NormalEquations:
    B: np.ndarray        # (6F, 6F) free-pose block
    E: np.ndarray        # (6F, D) pose/depth coupling
    C: np.ndarray        # (D,) depth diagonal
    v: np.ndarray        # (6F,)
    w: np.ndarray        # (D,)
    free_poses: np.ndarray
    free_depths: np.ndarray


def normal_equations(problem: BaProblem) -> NormalEquations:
    """Gauss-Newton system ``J^T W J`` / ``J^T W r`` split into Schur blocks."""
    proj, valid, X, RG, tG = project_edges(problem)
    r = problem.target - proj
    k = problem.edge_patch
    d = problem.inv_depths[k]
    J_i, J_j, J_d = center_jacobians(problem.K, X, d, RG, tG, problem.centers[k])
    wgt = problem.weight * valid[:, None]
    r = np.where(valid[:, None], r, 0.0)
    if not np.all(np.isfinite(r)):
        raise InvalidProblemError("non-finite residual")

    n_poses = len(problem.poses)
    n_dep = len(problem.inv_depths)
    pose_var = np.full(n_poses, -1)
    fixed = np.zeros(n_poses, bool)
    fixed[:problem.n_fixed] = True

    i_idx = problem.edge_frame
    j_idx = problem.patch_frame[k]
    # a pose is free only if some weighted edge moves it
    touched = np.zeros(n_poses, bool)
    Jsum_self = J_i + J_j
    for idx, J in ((i_idx, J_i), (j_idx, J_j)):
        act = (np.abs(J).sum(axis=(1, 2)) > 0) & (wgt.sum(axis=1) > 0) & (i_idx != j_idx)
        touched[idx[act]] = True
    free_poses = np.flatnonzero(~fixed & touched)
    pose_var[free_poses] = np.arange(len(free_poses))
    F = len(free_poses)

    Cfull = np.bincount(k, np.sum(wgt * J_d * J_d, axis=1), n_dep)
    free_depths = np.flatnonzero(~problem.depth_fixed & (Cfull > 1e-12))
    dep_var = np.full(n_dep, -1)
    dep_var[free_depths] = np.arange(len(free_depths))
    D = len(free_depths)

    a = pose_var[i_idx]
    b = pose_var[j_idx]
    dv = dep_var[k]
    # self edges: J_i + J_j is zero, both blocks land on the same pose
    same = i_idx == j_idx
    J_i = np.where(same[:, None, None], Jsum_self, J_i)
    J_j = np.where(same[:, None, None], 0.0, J_j)

    WJi = wgt[:, :, None] * J_i
    WJj = wgt[:, :, None] * J_j
    # diagonal weights: J^T W J is a sum of two outer products per edge
    def outer(A, Bm):
        return A[:, 0, :, None] * Bm[:, 0, None, :] + A[:, 1, :, None] * Bm[:, 1, None, :]

    def lin(A, u):
        return A[:, 0, :] * u[:, 0, None] + A[:, 1, :] * u[:, 1, None]

    Hii = outer(WJi, J_i)
    Hjj = outer(WJj, J_j)
    Hij = outer(WJi, J_j)
    gi = lin(WJi, r)
    gj = lin(WJj, r)
    WJd = wgt * J_d
    Eid = lin(WJi, J_d)
    Ejd = lin(WJj, J_d)
    gd = np.sum(WJd * r, axis=1)

    # scatter-add via bincount on flat indices of the (6F, 6F) / (6F, D) blocks
    n6 = 6 * F
    r6 = np.arange(6)
    ma, mb, md = a >= 0, b >= 0, dv >= 0

    def block_idx(p, q):
        return ((6 * p[:, None, None] + r6[None, :, None]) * n6 + 6 * q[:, None, None] + r6[None, None, :])

    mab = ma & mb
    idx = [block_idx(a[ma], a[ma]), block_idx(b[mb], b[mb]), block_idx(a[mab], b[mab]),
           block_idx(b[mab], a[mab])]
    val = [Hii[ma], Hjj[mb], Hij[mab], np.swapaxes(Hij[mab], 1, 2)]
    B = np.bincount(np.concatenate([x.ravel() for x in idx]),
                    np.concatenate([x.ravel() for x in val]), n6 * n6).reshape(n6, n6)
    v = np.bincount(np.concatenate([(6 * a[ma, None] + r6).ravel(), (6 * b[mb, None] + r6).ravel()]),
                    np.concatenate([gi[ma].ravel(), gj[mb].ravel()]), n6)
    mad, mbd = ma & md, mb & md
    eidx = np.concatenate([((6 * a[mad, None] + r6) * D + dv[mad, None]).ravel(),
                           ((6 * b[mbd, None] + r6) * D + dv[mbd, None]).ravel()])
    Em = np.bincount(eidx, np.concatenate([Eid[mad].ravel(), Ejd[mbd].ravel()]), n6 * D).reshape(n6, D)
    wv = np.bincount(dv[md], gd[md], D)

    return NormalEquations(B, Em, Cfull[free_depths], v, wv, free_poses, free_depths)


def schur_step(ne: NormalEquations, lam):
    """Solve the Marquardt-damped system ``(H + lam diag(H)) x = g`` by
    eliminating depths.  Returns ``(dxi (F, 6), ddepth (D,))``."""
    Bd = ne.B + lam * np.diag(np.diag(ne.B))
    Cd = ne.C * (1.0 + lam)
    Cinv = 1.0 / Cd
    S = Bd - (ne.E * Cinv) @ ne.E.T
    rhs = ne.v - ne.E @ (Cinv * ne.w)
    if S.size:
        dxi = cho_solve(cho_factor(S), rhs)
    else:
        dxi = np.zeros(0)
    ddep = Cinv * (ne.w - ne.E.T @ dxi)
    return dxi.reshape(-1, 6), ddep


def apply_step(problem: BaProblem, ne: NormalEquations, dxi, ddep, depth_bounds):
    poses = list(problem.poses)
    for n, p in enumerate(ne.free_poses):
        poses[p] = poses[p].retract(dxi[n])
    depths = problem.inv_depths.copy()
    depths[ne.free_depths] = np.clip(depths[ne.free_depths] + ddep, *depth_bounds)
    return poses, depths


@dataclass
class LmReport:
    costs: list = field(default_factory=list)       # cost before the first step, then after each
    accepted: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def lm_solve(problem: BaProblem, cfg: LmConfig = LmConfig(), lam=None):
    """Run exactly ``cfg.steps`` LM steps.  Returns (poses, inv_depths, report).

    The input problem is not modified.  A step is kept only if it lowers the
    cost; a problem already at the rounding floor (cost below ``1e-20`` per
    edge) that stays there counts as accepted with cost 0.  Otherwise the
    variables are restored and damping is raised.
    """
    lam = cfg.lambda_init if lam is None else lam
    lo, hi = cfg.lambda_bounds
    cur = problem.with_state(problem.poses, problem.inv_depths.copy())
    floor = 1e-20 * max(1, problem.n_edges)

    def cost_of(p):
        c = total_cost(p)
        return 0.0 if c <= floor else c

    cost = cost_of(cur)
    report = LmReport(costs=[cost])
    for _ in range(cfg.steps):
        ne = normal_equations(cur)
        report.lambdas.append(lam)
        try:
            dxi, ddep = schur_step(ne, lam)
        except (LinAlgError, ValueError) as exc:
            report.diagnostics.append(f"reduced system not positive definite at lambda={lam:g}: {exc}")
            report.accepted.append(False)
            report.costs.append(cost)
            lam = min(lam * cfg.lambda_up, hi)
            continue
        poses, depths = apply_step(cur, ne, dxi, ddep, cfg.depth_bounds)
        cand = cur.with_state(poses, depths)
        new_cost = cost_of(cand)
        zero = cost == 0.0 and new_cost == 0.0
        if np.isfinite(new_cost) and (new_cost < cost or zero):
            cur, cost = cand, new_cost
            report.accepted.append(True)
            lam = max(lam / cfg.lambda_down, lo)
        else:
            report.accepted.append(False)
            lam = min(lam * cfg.lambda_up, hi)
        report.costs.append(cost)
    report.final_lambda = lam
    return list(cur.poses), cur.inv_depths, report
