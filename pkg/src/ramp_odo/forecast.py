"""Continuous-time patch tracks and pose forecasting.

Each patch-center track is modelled by two natural cubic splines (one per
image axis).  Beyond the last knot a separate cubic carries the track to the
target time, and a single-pose bundle adjustment against the extrapolated
positions yields the forecast camera pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .ba import BaProblem, LmConfig, lm_solve
from .geometry import Se3Pose

EXTRAPOLATION_MODES = ("linear", "stationary")


class InvalidKnotsError(ValueError):
    pass


def natural_second_derivatives(t, y):
    """Second derivatives at the knots of the natural cubic interpolant."""
    n = len(t)
    M = np.zeros(n)
    if n < 3:
        return M
    h = np.diff(t)
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = h[1:-1]
    ab[1] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    rhs = 6.0 * (np.diff(y[1:]) / h[1:] - np.diff(y[:-1]) / h[:-1])
    M[1:-1] = solve_banded((1, 1), ab, rhs)
    return M


@dataclass(frozen=True)
class _Axis:
    t: np.ndarray
    y: np.ndarray
    M: np.ndarray

    def _piece(self, tq):
        i = np.clip(np.searchsorted(self.t, tq, "right") - 1, 0, len(self.t) - 2)
        return i, tq - self.t[i], self.t[i + 1] - self.t[i]

    def value(self, tq, nu=0):
        tq = np.asarray(tq, dtype=float)
        i, s, h = self._piece(tq)
        y0, y1, M0, M1 = self.y[i], self.y[i + 1], self.M[i], self.M[i + 1]
        a = (M1 - M0) / (6 * h)
        b = M0 / 2
        c = (y1 - y0) / h - h * (2 * M0 + M1) / 6
        if nu == 0:
            return y0 + s * (c + s * (b + s * a))
        if nu == 1:
            return c + s * (2 * b + 3 * a * s)
        if nu == 2:
            return 2 * b + 6 * a * s
        return 6 * a


@dataclass(frozen=True)
class TrackSpline:
    knots: np.ndarray   # (n, 3) rows (t, x, y)
    sx: _Axis
    sy: _Axis

    @property
    def t_last(self):
        return float(self.knots[-1, 0])

    def __call__(self, tq, nu=0):
        """Evaluate (x, y); valid inside the knot range."""
        return np.stack([self.sx.value(tq, nu), self.sy.value(tq, nu)], axis=-1)


def fit_track_spline(knots) -> TrackSpline:
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 2 or knots.shape[1] != 3 or len(knots) < 2:
        raise InvalidKnotsError("need at least two (t, x, y) knots")
    t = knots[:, 0]
    if np.any(np.diff(t) <= 0):
        raise InvalidKnotsError("knot times must be strictly increasing")
    axes = [_Axis(t, knots[:, k], natural_second_derivatives(t, knots[:, k])) for k in (1, 2)]
    return TrackSpline(knots, *axes)


def extrapolation_coefficients(value, slope, horizon, mode="linear"):
    """Cubic ``g(s) = c0 + c1 s + c2 s^2 + c3 s^3`` with ``s = t - t_k``.

    ``"stationary"``: g(0) = value, g'(0) = slope, g'(h) = g''(h) = 0.
    ``"linear"``: g(0) = value, g'(0) = slope, g''(0) = g'''(0) = 0, which
    continues the natural end condition of the fit.
    """
    value, slope = np.asarray(value, float), np.asarray(slope, float)
    if mode == "stationary":
        h = float(horizon)
        c3 = slope / (3 * h * h)
        c2 = -slope / h
    elif mode == "linear":
        c3 = np.zeros_like(slope)
        c2 = np.zeros_like(slope)
    else:
        raise ValueError(f"unknown extrapolation mode {mode!r}")
    return np.stack([value, slope, c2, c3], axis=-1)


def extrapolate(spline: TrackSpline, t_k, t_target, mode="linear"):
    """Position of the track at ``t_target`` past the last knot ``t_k``."""
    if not t_target > t_k:
        raise ValueError(f"target time {t_target} must follow last knot {t_k}")
    h = t_target - t_k
    coef = extrapolation_coefficients(spline(t_k), spline(t_k, 1), h, mode)
    return coef @ np.array([1.0, h, h * h, h**3])


def poly_eval(coef, s, nu=0):
    c0, c1, c2, c3 = np.moveaxis(coef, -1, 0)
    if nu == 0:
        return c0 + s * (c1 + s * (c2 + s * c3))
    if nu == 1:
        return c1 + s * (2 * c2 + 3 * c3 * s)
    if nu == 2:
        return 2 * c2 + 6 * c3 * s
    return 6 * c3


@dataclass(frozen=True)
class ForecastConfig:
    history_frames: int = 11
    min_knots: int = 4
    min_patches: int = 6
    extrapolation: str = "linear"
    lm: LmConfig = LmConfig(steps=8)

    def __post_init__(self):
        if self.history_frames < self.min_knots:
            raise ValueError("history_frames must be >= min_knots")
        if self.extrapolation not in EXTRAPOLATION_MODES:
            raise ValueError(f"extrapolation must be one of {EXTRAPOLATION_MODES}")


def constant_velocity(T_prev: Se3Pose, T_last: Se3Pose, dt_prev, dt_next):
    """Extrapolate the last relative motion, rescaled to the next interval."""
    rel = T_prev.inverse() @ T_last
    if dt_prev <= 0:
        return T_last
    return T_last @ Se3Pose.exp(rel.log() * (dt_next / dt_prev))


def collect_tracks(graph, cfg: ForecastConfig):
    """Per-patch knots ``(t_i, x, y)`` from corrected projections in the
    most recent ``history_frames`` frames."""
    window = graph.window()
    recent = window[-cfg.history_frames:]
    lo = recent[0]
    tracks = {}
    for (pid, i), e in graph.edges.items():
        P = graph.patches[pid]
        if i < lo or P.frame_index < lo or not np.any(e.sigma > 0):
            continue
        tracks.setdefault(pid, []).append((graph.frames[i].timestamp, *(e.projected + e.delta)))
    out = {}
    for pid, kn in tracks.items():
        if len(kn) >= cfg.min_knots:
            out[pid] = np.array(sorted(kn))
    return out


def forecast_targets(tracks, t_target, mode="linear"):
    out = {}
    for pid, kn in tracks.items():
        sp = fit_track_spline(kn)
        out[pid] = extrapolate(sp, sp.t_last, t_target, mode)
    return out


def solve_forecast(poses, K, patches, targets, weights, T_init, lm=LmConfig(steps=8)):
    """Single-pose BA: every pose in ``poses`` and all depths are frozen.

    ``poses`` maps frame index to pose; ``patches`` are the Patch objects whose
    forecast positions are ``targets`` (same order).  Returns (pose, report).
    """
    frames = sorted(poses)
    pos = {f: n for n, f in enumerate(frames)}
    plist = [poses[f] for f in frames] + [T_init]
    new = len(plist) - 1
    prob = BaProblem(
        poses=plist,
        inv_depths=np.array([P.inv_depth for P in patches]),
        centers=np.array([P.center for P in patches]),
        patch_frame=np.array([pos[P.frame_index] for P in patches]),
        edge_patch=np.arange(len(patches)),
        edge_frame=np.full(len(patches), new),
        target=np.asarray(targets),
        weight=np.asarray(weights),
        K=K,
        n_fixed=new,
        depth_fixed=np.ones(len(patches), bool),
    )
    out_poses, _, report = lm_solve(prob, lm)
    return out_poses[new], report


def forecast_pose(graph, poses, K, t_target, cfg: ForecastConfig = ForecastConfig(), tracks=None):
    """Forecast the camera pose at ``t_target``; ``None`` if too few tracks.

    ``tracks`` may override the per-patch forecast positions (pid -> (x, y)).
    Nothing in ``graph`` or ``poses`` is modified.
    """
    window = sorted(poses)
    if len(window) < 2:
        return None
    last, prev = window[-1], window[-2]
    t_last = graph.frames[last].timestamp
    dt_prev = t_last - graph.frames[prev].timestamp
    T_init = constant_velocity(poses[prev], poses[last], dt_prev, t_target - t_last)
    if tracks is None:
        tracks = forecast_targets(collect_tracks(graph, cfg), t_target, cfg.extrapolation)
    pids = [pid for pid in sorted(tracks) if graph.patches[pid].frame_index in poses]
    if len(pids) < cfg.min_patches:
        return None
    weights = []
    for pid in pids:
        e = graph.edges.get((pid, last))
        weights.append(e.sigma if e is not None and np.any(e.sigma > 0) else np.ones(2))
    T, _ = solve_forecast(poses, K, [graph.patches[p] for p in pids], [tracks[p] for p in pids],
                          weights, T_init, cfg.lm)
    return T
