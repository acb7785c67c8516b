"""Visual odometry over an interleaved stream of frames and event stacks.

Each frame triggers corner extraction, patch insertion, graph expansion and
a few rounds of (correction estimation, bundle adjustment).  Event stacks
only advance the encoder state and supply the density used for corners.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .ba import BaProblem, LmConfig, lm_solve
from .correction import (FEATURE_STRIDE, bilinear_sample, correlation_lookup_batch,
                         softargmax)
from .encoder import RampEncoder, SensorSample
from .events import EventStream, FormatError, read_evt, slice_last_n, build_stack
from .forecast import ForecastConfig, constant_velocity, forecast_pose
from .formats import parse_value, read_kv, read_pgm, read_tracks, read_tum, write_tum
from .geometry import Intrinsics, Patch, Se3Pose, warp_centers
from .patches import FrameRecord, PatchConfig, PatchGraph, backfill_depth_init, extract_corners
from .weights import EncoderConfig, read_rta

log = logging.getLogger(__name__)

CORRECTION_MODES = ("oracle", "softargmax")


@dataclass(frozen=True)
class PipelineConfig:
    weights_path: str | None = None
    seed: int = 0
    workers: int = 1
    patch: PatchConfig = PatchConfig()
    lm: LmConfig = LmConfig()
    forecast: ForecastConfig = ForecastConfig()
    encoder: EncoderConfig = EncoderConfig()
    rounds_per_frame: int = 4
    bootstrap_frames: int = 8
    bootstrap_rounds: int = 12
    correction_mode: str = "softargmax"
    use_forecast: bool = True
    events_per_stack: int = 600_000
    min_events_between_frames: int = 1_200_000
    stacks_per_frame_pair: int = 2
    scale: float = 1.0
    filter_frames: bool = False
    corr_radius: int = 3
    tau: float = 0.1
    oracle_noise: float = 0.0

    def __post_init__(self):
        if self.bootstrap_frames < 2:
            raise ValueError("bootstrap_frames must be >= 2")
        if self.correction_mode not in CORRECTION_MODES:
            raise ValueError(f"correction_mode must be one of {CORRECTION_MODES}")
        if self.stacks_per_frame_pair not in (0, 1, 2):
            raise ValueError("stacks_per_frame_pair must be 0, 1 or 2")
        if self.rounds_per_frame < 1 or self.scale <= 0:
            raise ValueError("rounds_per_frame >= 1 and scale > 0 required")

    @property
    def stack_events(self):
        return max(1, int(round(self.events_per_stack * self.scale)))

    @property
    def min_events(self):
        return int(round(self.min_events_between_frames * self.scale))


# flat key=value names for the nested configs
_NESTED = {"patch": PatchConfig, "lm": LmConfig, "forecast": ForecastConfig}
_ALIASES = {"weights": "weights_path"}


def config_from_kv(items, base: PipelineConfig = PipelineConfig()):
    """Flat keys: top-level fields, or ``patch.n_patches``-style nested ones."""
    top, nested, bad = {}, {k: {} for k in _NESTED}, []
    for key, text in items.items():
        key = _ALIASES.get(key, key)
        if "." in key:
            grp, name = key.split(".", 1)
            sub = getattr(base, grp, None) if grp in _NESTED else None
            if sub is None or name not in {f.name for f in fields(sub)}:
                bad.append(key)
                continue
            nested[grp][name] = parse_value(text, getattr(sub, name))
        elif key in {f.name for f in fields(PipelineConfig)} and key not in _NESTED and key != "encoder":
            like = getattr(base, key)
            top[key] = None if text.lower() in ("", "none") and like is None else \
                parse_value(text, "" if like is None else like)
        else:
            bad.append(key)
    if bad:
        raise KeyError(", ".join(sorted(bad)))
    for grp, vals in nested.items():
        if vals:
            top[grp] = replace(getattr(base, grp), **vals)
    return replace(base, **top)


def load_config(path):
    return config_from_kv(read_kv(path))


# -- stream preparation --------------------------------------------------

def select_frames(stamps, events: EventStream, min_events):
    """Indices of frames kept by the event-count filter."""
    keep = [0]
    for k in range(1, len(stamps)):
        if events.count_between(stamps[keep[-1]], stamps[k]) >= min_events:
            keep.append(k)
    return keep


def prepare_stream(frames, events: EventStream | None, cfg: PipelineConfig = PipelineConfig()):
    """Interleave frames with event stacks.

    ``frames`` is a sequence of ``(timestamp, image)``.  For each consecutive
    pair of kept frames two stacks are inserted, at the mid time and at the
    second frame's time, each from the last ``stack_events`` events before
    that instant.  A stack is left out when no event arrived since the
    previous frame.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    stamps = np.array([float(t) for t, _ in frames])
    if np.any(np.diff(stamps) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    if events is None:
        H, W = np.shape(frames[0][1])[-2:]
        events = EventStream.empty(W, H)
    keep = select_frames(stamps, events, cfg.min_events) if cfg.filter_frames else range(len(frames))
    keep = list(keep)

    def image_sample(k):
        img = np.asarray(frames[k][1], dtype=np.float32)
        return SensorSample(float(stamps[k]), "image", img[None] if img.ndim == 2 else img, k)

    def stack_sample(t, t_prev):
        if events.count_between(t_prev, t) == 0:
            return None
        ev = slice_last_n(events, cfg.stack_events, t)
        t0 = float(ev.t[0])
        if not t0 < t:
            t0 = float(np.nextafter(t, -np.inf))
        st = build_stack(ev, events.width, events.height, t0, t)
        return SensorSample(float(t), "events", st.data.astype(np.float32))

    out = [image_sample(keep[0])]
    for a, b in zip(keep[:-1], keep[1:]):
        ta, tb = stamps[a], stamps[b]
        instants = [0.5 * (ta + tb), tb][2 - cfg.stacks_per_frame_pair:] if cfg.stacks_per_frame_pair else []
        for t in instants:
            s = stack_sample(t, ta)
            if s is not None:
                out.append(s)
        out.append(image_sample(b))
    return out


# -- ground truth for synthetic runs -------------------------------------

class OracleTracks:
    """Exact correspondences for synthetic scenes.

    A patch center is lifted to a virtual 3D point using the inverse depth of
    the nearest ground-truth point in its source frame, then reprojected with
    the ground-truth poses.
    """

    def __init__(self, gt_poses, K: Intrinsics, tracks, inv_depth, visible, width, height):
        self.poses = list(gt_poses)
        self.K = K
        self.tracks = np.asarray(tracks)
        self.inv_depth = np.asarray(inv_depth)
        self.visible = np.asarray(visible, bool)
        self.width, self.height = width, height
        self._points = {}

    @classmethod
    def from_files(cls, gt_path, tracks_path, K, width, height):
        _, poses = read_tum(gt_path)
        rows = read_tracks(tracks_path)
        n_pts = 1 + max(r[1] for r in rows) if rows else 0
        tr = np.full((len(poses), n_pts, 2), np.nan)
        inv = np.zeros((len(poses), n_pts))
        vis = np.zeros((len(poses), n_pts), bool)
        for f, pid, x, y, d in rows:
            tr[f, pid] = (x, y)
            inv[f, pid] = d
            vis[f, pid] = True
        return cls(poses, K, tr, inv, vis, width, height)

    def lift(self, src, key, center):
        if key not in self._points:
            vis = np.flatnonzero(self.visible[src])
            if vis.size == 0:
                raise ValueError(f"no ground-truth points visible in frame {src}")
            dist = np.sum((self.tracks[src, vis] - center) ** 2, axis=1)
            d = self.inv_depth[src, vis[np.argmin(dist)]]
            x = np.array([(center[0] - self.K.cx) / self.K.fx, (center[1] - self.K.cy) / self.K.fy, 1.0])
            self._points[key] = self.poses[src] @ (x / d)
        return self._points[key]

    def observe(self, src, key, center, dst):
        """Ground-truth pixel of the lifted point in frame ``dst`` and a
        visibility flag."""
        xy, ok = self.observe_many([src], [key], [center], [dst])
        return xy[0], bool(ok[0])

    def observe_many(self, src, keys, centers, dst):
        if not hasattr(self, "_R"):
            self._R = np.stack([T.R for T in self.poses])
            self._t = np.stack([T.t for T in self.poses])
        X = np.stack([self.lift(s, k, c) for s, k, c in zip(src, keys, np.asarray(centers, float))])
        dst = np.asarray(dst)
        Xc = np.einsum("eki,ek->ei", self._R[dst], X - self._t[dst])
        z = Xc[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        xy = np.stack([self.K.fx * Xc[:, 0] / zs + self.K.cx, self.K.fy * Xc[:, 1] / zs + self.K.cy], -1)
        ok = front & (xy[:, 0] >= 0) & (xy[:, 0] <= self.width - 1) & (xy[:, 1] >= 0) \
            & (xy[:, 1] <= self.height - 1)
        return np.where(front[:, None], xy, 0.0), ok


# -- trajectory ----------------------------------------------------------

@dataclass
class TrajectoryEstimate:
    stamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    source_index: list = field(default_factory=list)
    forecast_stamps: list = field(default_factory=list)
    forecast_poses: list = field(default_factory=list)

    def __len__(self):
        return len(self.stamps)

    def write_tum(self, path):
        write_tum(path, self.stamps, self.poses)


# -- the pipeline --------------------------------------------------------

class VoPipeline:
    """Single-owner mutable odometry state."""

    def __init__(self, cfg: PipelineConfig, K: Intrinsics, height, width, oracle: OracleTracks | None = None,
                 weights=None):
        if cfg.correction_mode == "oracle" and oracle is None:
            raise ValueError("oracle correction mode needs ground-truth tracks")
        self.cfg = cfg
        self.K = K
        self.height, self.width = height, width
        self.oracle = oracle
        if weights is None and cfg.weights_path:
            weights = read_rta(cfg.weights_path)
        heads = ("m",)
        self.encoder = RampEncoder(height, width, weights, cfg.encoder, cfg.workers, cfg.seed, heads=heads)
        self.state = self.encoder.reset()
        self.graph = PatchGraph(cfg.patch)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise_rng = np.random.default_rng(cfg.seed + 7)
        self.last_density = None
        self.n_frames = 0
        self.estimates = {}            # frame index -> latest pose
        self.source = {}               # frame index -> input frame number
        self.stamps = {}
        self.src_feat = {}             # patch id -> matching feature at its center
        self.pixel_major = {}          # frame index -> (H*W, C) matching map for lookups
        self.forecasts = []
        self.reports = []
        self.bootstrapped = False
        self.lm_bootstrap = replace(cfg.lm)

    def close(self):
        self.encoder.close()

    # -- per sample ----------------------------------------------------

    def process_sample(self, sample: SensorSample):
        need = ("m",) if sample.is_frame and self.cfg.correction_mode == "softargmax" else ()
        self.state, feats = self.encoder.encode_next(self.state, sample, heads=need)
        if not sample.is_frame:
            self.last_density = np.abs(sample.payload).sum(axis=0)
            return None
        return self._process_frame(sample, feats.matching)

    def _corners(self):
        cfg = self.cfg.patch
        if self.last_density is not None and np.any(self.last_density > 0):
            pts = extract_corners(self.last_density, cfg, self.rng, fill=True)
        else:
            allowed = np.zeros((self.height, self.width), bool)
            b = cfg.border_px
            allowed[b:self.height - b, b:self.width - b] = True
            from .patches import random_corners
            pts = random_corners(allowed, cfg.n_patches, cfg.nms_radius, self.rng)
        self.last_density = None
        return pts

    def _initial_pose(self, j, t):
        window = self.graph.window()
        if not self.bootstrapped or len(window) < 2:
            return Se3Pose.identity()
        poses = {i: self.graph.frames[i].pose for i in window}
        if self.cfg.use_forecast:
            T = forecast_pose(self.graph, poses, self.K, t, self.cfg.forecast)
            if T is not None:
                self.forecasts.append((t, T))
                return T
        last, prev = window[-1], window[-2]
        return constant_velocity(poses[prev], poses[last], self.stamps[last] - self.stamps[prev],
                                 t - self.stamps[last])

    def _process_frame(self, sample, matching):
        j = self.n_frames
        t = float(sample.timestamp)
        pose = self._initial_pose(j, t)
        patches = [Patch.around(j, self.graph.new_patch_id(), (x, y), 1.0, self.cfg.patch.p)
                   for x, y in self._corners()]
        backfill_depth_init(self.graph, patches)
        if matching is not None:
            cen = np.array([P.center for P in patches]).reshape(-1, 2) / FEATURE_STRIDE
            feats = bilinear_sample(matching, cen)
            for P, f in zip(patches, feats):
                self.src_feat[P.patch_index] = f
        self.graph.add_frame(FrameRecord(j, t, pose, matching), patches)
        live = set(self.graph.patches)
        self.src_feat = {k: v for k, v in self.src_feat.items() if k in live}
        if matching is not None and self.cfg.correction_mode == "softargmax":
            self.pixel_major[j] = np.ascontiguousarray(matching.reshape(matching.shape[0], -1).T)
        self.pixel_major = {f: v for f, v in self.pixel_major.items() if f in self.graph.frames}
        self.n_frames += 1
        self.stamps[j] = t
        self.source[j] = sample.source_index if sample.source_index >= 0 else j

        window = self.graph.window()
        if not self.bootstrapped:
            if len(window) >= self.cfg.bootstrap_frames:
                self._optimize(self.cfg.bootstrap_rounds, n_fixed=1)
                self.bootstrapped = True
        else:
            self._optimize(self.cfg.rounds_per_frame, n_fixed=2)
        for i in window:
            self.estimates[i] = self.graph.frames[i].pose
        return self.graph.frames[j].pose

    # -- corrections and BA --------------------------------------------

    def _problem_layout(self):
        window = self.graph.window()
        pos = {f: n for n, f in enumerate(window)}
        pids = sorted(self.graph.patches)
        ppos = {p: n for n, p in enumerate(pids)}
        keys = sorted(self.graph.edges)
        P = [self.graph.patches[p] for p in pids]
        self._centers = np.array([p.center for p in P]).reshape(-1, 2)
        return window, pos, pids, ppos, keys, P

    def _project(self, window, pos, ppos, keys, P):
        Rs = np.stack([self.graph.frames[f].pose.R for f in window])
        ts = np.stack([self.graph.frames[f].pose.t for f in window])
        ei = np.array([pos[i] for _, i in keys])
        ek = np.array([ppos[p] for p, _ in keys])
        ej = np.array([pos[P[k].frame_index] for k in ek])
        depth = np.array([p.inv_depth for p in P])
        proj, valid, *_ = warp_centers(Rs[ei], ts[ei], Rs[ej], ts[ej], self.K, self._centers[ek], depth[ek])
        return proj, valid, ei, ek

    def _corrections(self, keys, P, proj, valid, ek):
        E = len(keys)
        delta = np.zeros((E, 2))
        sigma = np.zeros((E, 2))
        if self.cfg.correction_mode == "oracle":
            src = [self.source[P[k].frame_index] for k in ek]
            centers = self._centers[ek]
            gt, ok = self.oracle.observe_many(src, [pid for pid, _ in keys], centers,
                                              [self.source[i] for _, i in keys])
            ok &= valid
            delta[ok] = gt[ok] - proj[ok]
            if self.cfg.oracle_noise > 0:
                delta[ok] += self.noise_rng.normal(0.0, self.cfg.oracle_noise, (int(ok.sum()), 2))
            sigma[ok] = 1.0
            return delta, sigma
        R = self.cfg.corr_radius
        frame_of = np.array([i for _, i in keys])
        for i in np.unique(frame_of):
            sel = np.flatnonzero(frame_of == i)
            m_i = self.graph.frames[i].features
            src = np.stack([self.src_feat[keys[n][0]] for n in sel])
            pc = np.where(valid[sel, None], proj[sel], -1e6)
            for lo in range(0, len(sel), 1024):
                part = slice(lo, lo + 1024)
                scores, masked = correlation_lookup_batch(m_i, src[part], pc[part], R,
                                                          self.pixel_major.get(i))
                d, s = softargmax(scores, self.cfg.tau, masked=masked)
                delta[sel[part]] = d
                sigma[sel[part]] = s
        return delta, sigma

    def _optimize(self, rounds, n_fixed):
        for _ in range(rounds):
            window, pos, pids, ppos, keys, P = self._problem_layout()
            proj, valid, ei, ek = self._project(window, pos, ppos, keys, P)
            delta, sigma = self._corrections(keys, P, proj, valid, ek)
            for n, key in enumerate(keys):
                e = self.graph.edges[key]
                e.projected, e.delta, e.sigma = proj[n], delta[n], sigma[n]
            # self edges carry no information about the poses
            w = np.where((ei == np.array([pos[P[k].frame_index] for k in ek]))[:, None], 0.0, sigma)
            prob = BaProblem(
                poses=[self.graph.frames[f].pose for f in window],
                inv_depths=np.array([p.inv_depth for p in P]),
                centers=self._centers,
                patch_frame=np.array([pos[p.frame_index] for p in P]),
                edge_patch=ek, edge_frame=ei,
                target=proj + delta, weight=w, K=self.K,
                n_fixed=min(n_fixed, len(window)),
            )
            poses, depths, report = lm_solve(prob, self.cfg.lm)
            self.reports.append(report)
            for f, T in zip(window, poses):
                self.graph.frames[f].pose = T
            for p, d in zip(P, depths):
                p.inv_depth = float(d)

    # -- results -------------------------------------------------------

    def trajectory(self) -> TrajectoryEstimate:
        out = TrajectoryEstimate()
        for j in sorted(self.estimates):
            out.stamps.append(self.stamps[j])
            out.poses.append(self.estimates[j])
            out.source_index.append(self.source[j])
        for t, T in self.forecasts:
            out.forecast_stamps.append(t)
            out.forecast_poses.append(T)
        return out


def run_samples(samples, cfg, K, height, width, oracle=None, weights=None) -> TrajectoryEstimate:
    pipe = VoPipeline(cfg, K, height, width, oracle, weights)
    try:
        for s in samples:
            pipe.process_sample(s)
        if not pipe.bootstrapped and pipe.n_frames >= 2:
            pipe._optimize(cfg.bootstrap_rounds, n_fixed=1)
            for i in pipe.graph.window():
                pipe.estimates[i] = pipe.graph.frames[i].pose
        return pipe.trajectory()
    finally:
        pipe.close()


# -- dataset loading -----------------------------------------------------

def load_calib(path):
    kv = read_kv(path)
    try:
        K = Intrinsics(*(float(kv[k]) for k in ("fx", "fy", "cx", "cy")))
        return K, int(kv["width"]), int(kv["height"])
    except KeyError as exc:
        raise FormatError(f"calibration missing key {exc.args[0]}", path) from None


def load_frames(frames_dir):
    stamp_path = os.path.join(frames_dir, "timestamps.txt")
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".pgm"))
    if not names:
        raise FormatError("no .pgm frames found", frames_dir)
    stamps = []
    with open(stamp_path, "rb") as fh:
        offset = 0
        for raw in fh:
            line = raw.strip()
            if line:
                try:
                    stamps.append(float(line))
                except ValueError:
                    raise FormatError("bad timestamp", stamp_path, offset) from None
            offset += len(raw)
    if len(stamps) != len(names):
        raise FormatError(f"{len(stamps)} timestamps for {len(names)} frames", stamp_path)
    return [(t, read_pgm(os.path.join(frames_dir, n))) for t, n in zip(stamps, names)]


def run(frames_dir, events_path=None, cfg: PipelineConfig = PipelineConfig(), calib_path=None,
        gt_path=None, tracks_path=None) -> TrajectoryEstimate:
    """Run on files written in the dataset layout of :mod:`synth`."""
    root = os.path.dirname(os.path.abspath(frames_dir))
    calib_path = calib_path or os.path.join(root, "calib.txt")
    K, width, height = load_calib(calib_path)
    frames = load_frames(frames_dir)
    events = read_evt(events_path) if events_path else None
    if events is not None and (events.width, events.height) != (width, height):
        raise FormatError(f"events are {events.width}x{events.height}, frames {width}x{height}", events_path)
    oracle = None
    if cfg.correction_mode == "oracle":
        gt_path = gt_path or os.path.join(root, "gt.tum")
        tracks_path = tracks_path or os.path.join(root, "tracks.csv")
        oracle = OracleTracks.from_files(gt_path, tracks_path, K, width, height)
    samples = prepare_stream(frames, events, cfg)
    return run_samples(samples, cfg, K, height, width, oracle)


def oracle_for_dataset(ds) -> OracleTracks:
    r = ds.render
    return OracleTracks(ds.poses, ds.spec.intrinsics, r.tracks, r.inv_depth, r.visible,
                        ds.spec.width, ds.spec.height)


def run_synthetic(ds, cfg: PipelineConfig = PipelineConfig(), weights=None) -> TrajectoryEstimate:
    """Run on an in-memory :class:`synth.SyntheticDataset`."""
    frames = list(zip(ds.timestamps, ds.frames))
    samples = prepare_stream(frames, ds.events, cfg)
    oracle = oracle_for_dataset(ds) if cfg.correction_mode == "oracle" else None
    return run_samples(samples, cfg, ds.spec.intrinsics, ds.spec.height, ds.spec.width, oracle, weights)
