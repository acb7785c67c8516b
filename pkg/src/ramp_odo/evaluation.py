"""Trajectory alignment, absolute trajectory error and the AUC summary of
success rate against error threshold."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .geometry import matrix_to_quat, quat_to_matrix


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentResult:
    scale: float
    rotation: np.ndarray      # quaternion (x, y, z, w)
    translation: np.ndarray
    ate_rmse: float

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def apply(self, pts):
        return self.scale * np.asarray(pts) @ self.R.T + self.translation


def umeyama_align(est, gt, with_scale=True) -> AlignmentResult:
    """Least-squares ``gt ~ s R est + t`` (Umeyama 1991)."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError(f"point sets must both be (n, 3), got {est.shape} and {gt.shape}")
    n = len(est)
    if n < 3:
        raise DegenerateInputError("need at least 3 points")
    mu_e, mu_g = est.mean(0), gt.mean(0)
    de, dg = est - mu_e, gt - mu_g
    cov = dg.T @ de / n
    U, S, Vt = np.linalg.svd(cov)
    sv_e = np.linalg.svd(de, compute_uv=False)
    if np.linalg.matrix_rank(cov, tol=1e-12 * max(1.0, S[0])) < 2 or sv_e[1] <= 1e-12 * max(1.0, sv_e[0]):
        raise DegenerateInputError("points are colinear or coincident")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_e = np.mean(np.sum(de * de, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var_e) if with_scale else 1.0
    t = mu_g - s * R @ mu_e
    aligned = s * est @ R.T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))
    return AlignmentResult(s, matrix_to_quat(R), t, ate)


def ate(est_poses, gt_poses, with_scale=True):
    est = np.array([T.center() for T in est_poses])
    gt = np.array([T.center() for T in gt_poses])
    return umeyama_align(est, gt, with_scale)


def trajectory_length(poses):
    c = np.array([T.center() for T in poses])
    return float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1)))


def auc_thresholds(tau_max, n_grid):
    return tau_max * np.arange(1, n_grid + 1) / n_grid


def auc_of_threshold(ate_values, tau_max=1.0, n_grid=100) -> float:
    """Mean success rate over ``n_grid`` uniform thresholds in (0, tau_max]."""
    e = np.asarray(ate_values, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no error values")
    if tau_max <= 0 or n_grid < 2:
        raise ValueError("need tau_max > 0 and n_grid >= 2")
    taus = auc_thresholds(tau_max, n_grid)
    return float(np.mean(e[None, :] <= taus[:, None]))


def auc_contributions(ate_values, tau_max=1.0, n_grid=100):
    """Per-sequence shares of the AUC; they sum to ``auc_of_threshold``."""
    e = np.asarray(ate_values, dtype=float).ravel()
    taus = auc_thresholds(tau_max, n_grid)
    return (e[:, None] <= taus[None, :]).sum(axis=1) / (len(e) * n_grid)


def write_report(csv_path, json_path, names, ate_values, tau_max=1.0, n_grid=100):
    contrib = auc_contributions(ate_values, tau_max, n_grid)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "ate", "auc_contribution"])
        for name, a, c in zip(names, ate_values, contrib):
            w.writerow([name, f"{a:.9f}", f"{c:.9f}"])
    summary = {
        "sequences": len(names),
        "auc": auc_of_threshold(ate_values, tau_max, n_grid),
        "tau_max": tau_max,
        "n_grid": n_grid,
        "mean_ate": float(np.mean(ate_values)),
        "median_ate": float(np.median(ate_values)),
    }
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
