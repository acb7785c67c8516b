"""SE(3) poses, pinhole intrinsics in 4x4 homogeneous form, patches and the
patch projection map with its analytic Jacobians.

Pose convention used everywhere in this package: a pose ``T`` maps camera
coordinates to world coordinates (world-from-camera).  The warp of a patch
from its source frame ``j`` into frame ``i`` is therefore ``T_i^-1 T_j``.
Local increments are right-multiplicative, ``T <- T exp(xi)`` with
``xi = (rho, phi)`` (translation first, rotation second).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 1e-8


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# Quaternions are stored as (x, y, z, w), the TUM ordering.

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical hemisphere keeps log() on the short arc
    return np.where(q[..., 3:4] < 0, -q, q)


def quat_multiply(a, b):
    ax, ay, az, aw = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def quat_to_matrix(q):
    x, y, z, w = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(np.array(q))


def so3_exp_quat(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    if theta < 1e-12:
        return quat_normalize(np.array([0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2], 1.0]))
    axis = phi / theta
    return np.concatenate([np.sin(0.5 * theta) * axis, [np.cos(0.5 * theta)]])


def so3_log_quat(q):
    q = quat_normalize(q)
    v, w = q[:3], q[3]
    n = np.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v / w
    theta = 2.0 * np.arctan2(n, w)
    return theta * v / n


def _left_jacobian(phi):
    """SO(3) left Jacobian V with t = V rho in the SE(3) exponential."""
    theta = np.linalg.norm(phi)
    Phi = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * Phi + Phi @ Phi / 6.0
    a = (1 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * Phi + b * Phi @ Phi


@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform, world-from-camera; quaternion (x, y, z, w)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=float)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def exp(cls, xi):
        """SE(3) exponential of ``xi = (rho, phi)``."""
        xi = np.asarray(xi, dtype=float)
        rho, phi = xi[:3], xi[3:]
        return cls(so3_exp_quat(phi), _left_jacobian(phi) @ rho)

    def log(self):
        phi = so3_log_quat(self.rotation)
        rho = np.linalg.solve(_left_jacobian(phi), self.translation)
        return np.concatenate([rho, phi])

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        qi = quat_conjugate(self.rotation)
        return Se3Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, Se3Pose):
            return Se3Pose(quat_multiply(self.rotation, other.rotation),
                           self.R @ other.translation + self.translation)
        pts = np.asarray(other, dtype=float)
        return pts @ self.R.T + self.translation

    def retract(self, xi):
        """Right-multiplicative update ``T exp(xi)``."""
        return self @ Se3Pose.exp(xi)

    def center(self):
        return self.translation.copy()


def relative_pose(T_i: Se3Pose, T_j: Se3Pose) -> Se3Pose:
    """Transform taking frame-j camera coordinates to frame-i camera coordinates."""
    return T_i.inverse() @ T_j


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self):
        """4x4 homogeneous camera matrix acting on [x, y, 1, d] vectors."""
        return np.array([
            [self.fx, 0.0, self.cx, 0.0],
            [0.0, self.fy, self.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])

    @property
    def K_inv(self):
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0],
            [0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass
class Patch:
    """p x p block of contiguous pixels sharing one inverse depth."""

    frame_index: int
    patch_index: int
    coords: np.ndarray  # 3 x p^2, rows x; y; 1
    inv_depth: float
    p: int = 3

    @classmethod
    def around(cls, frame_index, patch_index, center, inv_depth, p=3):
        if p < 1 or p % 2 == 0:
            raise ValueError(f"patch side must be odd and positive, got {p}")
        r = p // 2
        offs = np.arange(-r, r + 1, dtype=float)
        yy, xx = np.meshgrid(offs + center[1], offs + center[0], indexing="ij")
        coords = np.stack([xx.ravel(), yy.ravel(), np.ones(p * p)])
        return cls(frame_index, patch_index, coords, float(inv_depth), p)

    @property
    def center(self):
        return self.coords[:2, (self.p * self.p - 1) // 2].copy()


@dataclass
class ProjectedPatch:
    pixels: np.ndarray  # 2 x p^2
    valid: np.ndarray   # p^2 bools

    @property
    def center(self):
        return self.pixels[:, (self.pixels.shape[1] - 1) // 2]

    @property
    def center_valid(self):
        return bool(self.valid[(self.valid.shape[0] - 1) // 2])


def transform_points(R, t, uv, d):
    """Apply relative transforms to inverse-depth points.

    ``uv`` holds normalized image coordinates (..., 2) and ``d`` inverse depths
    (...).  Returns the homogeneous 3-part ``R [u, v, 1] + t d`` which is the
    camera-frame point scaled by the inverse depth, never divided by ``d``.
    """
    P = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    return np.einsum("...ij,...j->...i", R, P) + t * d[..., None]


def project_points(K: Intrinsics, X):
    Z = X[..., 2]
    valid = Z > MIN_DEPTH
    Zs = np.where(valid, Z, 1.0)
    x = K.fx * X[..., 0] / Zs + K.cx
    y = K.fy * X[..., 1] / Zs + K.cy
    return np.stack([x, y], axis=-1), valid


def normalize_pixels(K: Intrinsics, xy):
    xy = np.asarray(xy, dtype=float)
    return np.stack([(xy[..., 0] - K.cx) / K.fx, (xy[..., 1] - K.cy) / K.fy], axis=-1)


def project_patch(T_i: Se3Pose, T_j: Se3Pose, K: Intrinsics, P: Patch,
                  width=None, height=None, margin=1.0) -> ProjectedPatch:
    """Warp every pixel of ``P`` from its source frame ``j`` into frame ``i``.

    Image bounds are only checked when ``width``/``height`` are given.
    """
    if P.inv_depth <= 0:
        raise ValueError("patch inverse depth must be positive")
    G = relative_pose(T_i, T_j)
    uv = normalize_pixels(K, P.coords[:2].T)
    X = transform_points(G.R, G.t, uv, np.full(uv.shape[0], P.inv_depth))
    xy, valid = project_points(K, X)
    if width is not None and height is not None:
        valid &= (xy[:, 0] >= -margin) & (xy[:, 0] < width + margin)
        valid &= (xy[:, 1] >= -margin) & (xy[:, 1] < height + margin)
    return ProjectedPatch(xy.T, valid)


def warp_centers(Ri, ti, Rj, tj, K: Intrinsics, xy, d):
    """Batched center-pixel warp; all arguments carry a leading edge axis."""
    RiT = np.swapaxes(Ri, -1, -2)
    RG = RiT @ Rj
    tG = np.einsum("...ij,...j->...i", RiT, tj - ti)
    X = transform_points(RG, tG, normalize_pixels(K, xy), d)
    proj, valid = project_points(K, X)
    return proj, valid, X, RG, tG


def residual(projected_center, delta, T_i, T_j, K, P):
    """Residual ``(P' + delta) - omega(T_i, T_j, P)`` at the patch center.

    Returns ``None`` when the current projection of the center is invalid.
    """
    proj = project_patch(T_i, T_j, K, P)
    if not proj.center_valid:
        return None
    return np.asarray(projected_center, dtype=float) + np.asarray(delta, dtype=float) - proj.center


def center_jacobians(K: Intrinsics, X, d, RG, tG, xy):
    """Analytic Jacobians of the center projection, batched over edges.

    ``X`` is the homogeneous point in frame i (``R_G P + t_G d``), ``d`` the
    inverse depth.  Returns ``(J_i, J_j, J_d)`` with shapes (E,2,6), (E,2,6), (E,2).
    """
    Xx, Xy, Z = X[..., 0], X[..., 1], X[..., 2]
    iz = 1.0 / np.where(np.abs(Z) > MIN_DEPTH, Z, MIN_DEPTH)
    E = X.shape[:-1]
    Jp = np.zeros(E + (2, 3))
    Jp[..., 0, 0] = K.fx * iz
    Jp[..., 0, 2] = -K.fx * Xx * iz * iz
    Jp[..., 1, 1] = K.fy * iz
    Jp[..., 1, 2] = -K.fy * Xy * iz * iz

    # d/d xi_i of exp(-xi_i) q : [-d I | [X]x]
    dX_i = np.zeros(E + (3, 6))
    dX_i[..., :, :3] = -d[..., None, None] * np.eye(3)
    dX_i[..., :, 3:] = skew(X)

    # d/d xi_j of G exp(xi_j) p : R_G [d I | -[P]x]
    P = np.concatenate([normalize_pixels(K, xy), np.ones(E + (1,))], axis=-1)
    local = np.zeros(E + (3, 6))
    local[..., :, :3] = d[..., None, None] * np.eye(3)
    local[..., :, 3:] = -skew(P)
    dX_j = RG @ local

    J_i = Jp @ dX_i
    J_j = Jp @ dX_j
    J_d = np.einsum("...ij,...j->...i", Jp, tG)
    return J_i, J_j, J_d


def jacobians(T_i: Se3Pose, T_j: Se3Pose, K: Intrinsics, P: Patch):
    """Derivatives of the projected patch center w.r.t. right increments on
    ``T_i``, ``T_j`` and w.r.t. the inverse depth."""
    G = relative_pose(T_i, T_j)
    xy = P.center[None]
    d = np.array([P.inv_depth])
    X = transform_points(G.R[None], G.t[None], normalize_pixels(K, xy), d)
    J_i, J_j, J_d = center_jacobians(K, X, d, G.R[None], G.t[None], xy)
    return J_i[0], J_j[0], J_d[0].reshape(2, 1)
