"""Synthetic ground-truth worlds: a seeded point cloud, a closed-form camera
trajectory, Gaussian-splat intensity frames and the dataset files built
from them.

Poses are world-from-camera; the first camera looks down +z.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .events import EgmConfig, synthesize_events, write_evt
from .formats import parse_value, read_kv, write_kv, write_pgm, write_tracks, write_tum
from .geometry import Intrinsics, Se3Pose, so3_exp_quat

TRAJECTORY_KINDS = ("static", "constant-velocity", "circular", "spline-waypoints")


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_points: int = 500
    box_min: tuple = (-1.0, -1.0, 3.0)
    box_max: tuple = (1.0, 1.0, 6.0)
    kind: str = "constant-velocity"
    n_frames: int = 200
    frame_rate: float = 30.0
    width: int = 320
    height: int = 240
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 160.0
    cy: float = 120.0
    splat_radius: float = 1.5
    background: float = 0.2
    amplitude: tuple = (0.4, 0.8)
    # constant-velocity twist in the camera frame: m/s and rad/s
    velocity: tuple = (0.6, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.02, 0.0)
    start: tuple | None = None      # default: centers the path on x = 0
    # circular: radius (m) around ``start`` in the image-parallel plane
    radius: float = 0.5
    revolutions: float = 1.0
    # spline-waypoints
    n_waypoints: int = 5
    waypoint_spread: float = 0.5
    min_visible: float = 0.8
    contrast_threshold: float = 0.2

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"kind must be one of {TRAJECTORY_KINDS}, got {self.kind!r}")
        if self.n_frames < 2 or self.n_points < 1:
            raise ValueError("need n_frames >= 2 and n_points >= 1")
        if self.frame_rate <= 0 or self.splat_radius <= 0:
            raise ValueError("frame_rate and splat_radius must be positive")
        if not 0 <= self.background <= 1:
            raise ValueError("background intensity must lie in [0, 1]")
        if any(lo >= hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError("box_min must be below box_max on every axis")

    @property
    def intrinsics(self):
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def timestamps(self):
        return np.arange(self.n_frames) / self.frame_rate

    @property
    def origin(self):
        if self.start is not None:
            return np.asarray(self.start, dtype=float)
        if self.kind == "constant-velocity":
            return -0.5 * np.asarray(self.velocity, dtype=float) * (self.n_frames - 1) / self.frame_rate
        return np.zeros(3)


def spec_from_kv(items, base: SceneSpec = SceneSpec()):
    """Build a spec from ``key=value`` strings; unknown keys raise KeyError."""
    known = {f.name: getattr(base, f.name) for f in fields(SceneSpec)}
    known["start"] = (0.0,)
    bad = sorted(set(items) - set(known))
    if bad:
        raise KeyError(", ".join(bad))
    return replace(base, **{k: parse_value(v, known[k]) for k, v in items.items()})


def load_spec(path):
    return spec_from_kv(read_kv(path))


def save_spec(path, spec: SceneSpec):
    def fmt(v):
        return ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
    write_kv(path, {f.name: fmt(getattr(spec, f.name)) for f in fields(SceneSpec)
                    if getattr(spec, f.name) is not None})


def trajectory(spec: SceneSpec, rng=None):
    """Closed-form world-from-camera poses at the frame timestamps."""
    t = spec.timestamps
    start = spec.origin
    if spec.kind == "static":
        return [Se3Pose(np.array([0.0, 0, 0, 1]), start.copy()) for _ in t]
    if spec.kind == "constant-velocity":
        # constant body-frame twist: every inter-frame motion is the same
        xi = np.concatenate([spec.velocity, spec.angular_velocity]).astype(float)
        T0 = Se3Pose(np.array([0.0, 0, 0, 1]), start)
        return [T0 @ Se3Pose.exp(xi * tk) for tk in t]
    if spec.kind == "circular":
        T = spec.n_frames / spec.frame_rate
        ang = 2 * np.pi * spec.revolutions * t / T
        pts = start + spec.radius * np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], -1)
        return [Se3Pose(np.array([0.0, 0, 0, 1]), p) for p in pts]
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = max(2, spec.n_waypoints)
    tw = np.linspace(t[0], t[-1], n)
    way = start + rng.uniform(-spec.waypoint_spread, spec.waypoint_spread, (n, 3))
    rot = rng.uniform(-0.05, 0.05, (n, 3))
    way[0], rot[0] = start, 0.0
    ps, rs = CubicSpline(tw, way)(t), CubicSpline(tw, rot)(t)
    return [Se3Pose(so3_exp_quat(r), p) for r, p in zip(rs, ps)]


def project_world(points, pose: Se3Pose, K: Intrinsics):
    """Pixels, camera depth of world points seen from ``pose``."""
    Xc = (np.asarray(points) - pose.t) @ pose.R
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = K.fx * Xc[:, 0] / z + K.cx
        y = K.fy * Xc[:, 1] / z + K.cy
    return np.stack([x, y], -1), z


def visibility(points, poses, spec: SceneSpec, margin=0.0):
    K = spec.intrinsics
    vis = np.zeros((len(poses), len(points)), bool)
    for k, T in enumerate(poses):
        xy, z = project_world(points, T, K)
        vis[k] = ((z > 1e-6) & (xy[:, 0] >= margin) & (xy[:, 0] <= spec.width - 1 - margin)
                  & (xy[:, 1] >= margin) & (xy[:, 1] <= spec.height - 1 - margin))
    return vis


def generate_scene(spec: SceneSpec, max_retries=100):
    """Seeded points (uniform in the world-frame box) and ground-truth poses.

    The cloud is resampled until every point is visible in at least
    ``min_visible`` of the frames.
    """
    rng = np.random.default_rng(spec.seed)
    poses = trajectory(spec, rng)
    lo, hi = np.asarray(spec.box_min), np.asarray(spec.box_max)
    for _ in range(max_retries):
        points = rng.uniform(lo, hi, (spec.n_points, 3))
        vis = visibility(points, poses, spec)
        if np.all(vis.mean(axis=0) >= spec.min_visible):
            return points, poses
    raise SceneGenerationError(f"no scene with all points visible in {spec.min_visible:.0%} "
                               f"of frames after {max_retries} retries")


@dataclass
class RenderResult:
    frames: list                 # H x W float arrays in [0, 1]
    tracks: np.ndarray           # (n_frames, n_points, 2) exact projected centers
    inv_depth: np.ndarray        # (n_frames, n_points)
    visible: np.ndarray          # (n_frames, n_points)
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))


def render_frame(xy, amp, spec: SceneSpec):
    H, W = spec.height, spec.width
    s = spec.splat_radius
    r = int(np.ceil(3 * s))
    img = np.full(H * W, spec.background)
    if len(xy) == 0:
        return img.reshape(H, W)
    cx = np.rint(xy[:, 0]).astype(np.int64)
    cy = np.rint(xy[:, 1]).astype(np.int64)
    for oy in range(-r, r + 1):
        for ox in range(-r, r + 1):
            px, py = cx + ox, cy + oy
            ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
            g = amp * np.exp(-((px - xy[:, 0]) ** 2 + (py - xy[:, 1]) ** 2) / (2 * s * s))
            img += np.bincount(py[ok] * W + px[ok], g[ok], H * W)
    return np.clip(img, 0.0, 1.0).reshape(H, W)


def render_frames(points, poses, spec: SceneSpec, rng=None) -> RenderResult:
    rng = np.random.default_rng(spec.seed + 1) if rng is None else rng
    amp = rng.uniform(*spec.amplitude, len(points))
    K = spec.intrinsics
    frames, tracks, inv, vis = [], [], [], []
    for T in poses:
        xy, z = project_world(points, T, K)
        v = (z > 1e-6) & np.all(np.isfinite(xy), axis=1)
        near = v & (xy[:, 0] > -4 * spec.splat_radius) & (xy[:, 0] < spec.width + 4 * spec.splat_radius) \
            & (xy[:, 1] > -4 * spec.splat_radius) & (xy[:, 1] < spec.height + 4 * spec.splat_radius)
        frames.append(render_frame(xy[near], amp[near], spec))
        tracks.append(xy)
        inv.append(np.where(v, 1.0 / np.where(v, z, 1.0), 0.0))
        vis.append(v & (xy[:, 0] >= 0) & (xy[:, 0] <= spec.width - 1)
                   & (xy[:, 1] >= 0) & (xy[:, 1] <= spec.height - 1))
    return RenderResult(frames, np.array(tracks), np.array(inv), np.array(vis), amp)


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    points: np.ndarray
    poses: list
    render: RenderResult
    events: object

    @property
    def timestamps(self):
        return self.spec.timestamps

    @property
    def frames(self):
        return self.render.frames


def make_dataset(spec: SceneSpec) -> SyntheticDataset:
    points, poses = generate_scene(spec)
    render = render_frames(points, poses, spec)
    events = synthesize_events(zip(render.frames, spec.timestamps),
                               EgmConfig(contrast_threshold=spec.contrast_threshold))
    return SyntheticDataset(spec, points, poses, render, events)


def emit_dataset(ds: SyntheticDataset, out_dir):
    """Write frames/NNNNNN.pgm, frames/timestamps.txt, events.evt, gt.tum,
    tracks.csv, calib.txt and spec.txt under ``out_dir``."""
    if len(ds.render.frames) != len(ds.poses):
        raise ValueError("frame and pose counts differ")
    fdir = os.path.join(out_dir, "frames")
    os.makedirs(fdir, exist_ok=True)
    ts = ds.timestamps
    for k, img in enumerate(ds.render.frames):
        write_pgm(os.path.join(fdir, f"{k:06d}.pgm"), img)
    with open(os.path.join(fdir, "timestamps.txt"), "w") as fh:
        for t in ts:
            fh.write(f"{t:.17g}\n")
    write_evt(os.path.join(out_dir, "events.evt"), ds.events)
    write_tum(os.path.join(out_dir, "gt.tum"), ts, ds.poses)
    rows = []
    for k in range(len(ds.poses)):
        for pid in np.flatnonzero(ds.render.visible[k]):
            x, y = ds.render.tracks[k, pid]
            rows.append((k, pid, x, y, ds.render.inv_depth[k, pid]))
    write_tracks(os.path.join(out_dir, "tracks.csv"), rows)
    K = ds.spec.intrinsics
    write_kv(os.path.join(out_dir, "calib.txt"),
             {"fx": repr(K.fx), "fy": repr(K.fy), "cx": repr(K.cx), "cy": repr(K.cy),
              "width": ds.spec.width, "height": ds.spec.height})
    save_spec(os.path.join(out_dir, "spec.txt"), ds.spec)
    return out_dir
