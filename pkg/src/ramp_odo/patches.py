"""Corner extraction on event density, patch bookkeeping and the bipartite
patch/frame graph over a sliding window."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Patch


@dataclass(frozen=True)
class PatchConfig:
    n_patches: int = 64
    p: int = 3
    nms_radius: int = 8
    window_r: int = 12
    border: int | None = None   # defaults to p

    def __post_init__(self):
        if self.p < 1 or self.p % 2 == 0:
            raise ValueError("patch side p must be odd and >= 1")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if self.window_r < 2:
            raise ValueError("window_r must be >= 2")

    @property
    def border_px(self):
        return self.p if self.border is None else self.border


def _suppress(mask, x, y, radius):
    H, W = mask.shape
    mask[max(0, y - radius):min(H, y + radius + 1), max(0, x - radius):min(W, x + radius + 1)] = False


def extract_corners(density, cfg: PatchConfig, rng=None, fill=True):
    """Greedy non-maximum suppression on the 3x3 box-smoothed density.

    Returns up to ``cfg.n_patches`` integer ``(x, y)`` positions.  Equal
    smoothed scores are ordered by raw density, then row-major position.  With ``fill`` and a generator, the
    remainder is topped up with random positions obeying the same spacing.
    """
    density = np.asarray(density, dtype=float)
    if np.any(density < 0):
        raise ValueError("density must be nonnegative")
    H, W = density.shape
    # 3x3 box sum in a fixed offset order, so windows holding the same values tie exactly
    pad = np.pad(density, 1)
    score = np.zeros((H, W))
    for dy in range(3):
        for dx in range(3):
            score += pad[dy:dy + H, dx:dx + W]
    b = cfg.border_px
    allowed = np.zeros((H, W), bool)
    allowed[b:H - b, b:W - b] = True
    flat = score.ravel()
    # lexsort is stable: row-major order survives among full ties
    order = np.lexsort((-density.ravel(), -flat))
    order = order[flat[order] > 0]
    corners = []
    for idx in order:
        if len(corners) >= cfg.n_patches:
            break
        y, x = divmod(int(idx), W)
        if not allowed[y, x]:
            continue
        corners.append((x, y))
        _suppress(allowed, x, y, cfg.nms_radius)
    if fill and rng is not None and len(corners) < cfg.n_patches:
        corners += random_corners(allowed, cfg.n_patches - len(corners), cfg.nms_radius, rng)
    return corners


def random_corners(allowed, n, radius, rng):
    """Seeded random positions inside ``allowed`` (modified in place)."""
    out = []
    H, W = allowed.shape
    for _ in range(n):
        cand = np.flatnonzero(allowed)
        if cand.size == 0:
            break
        y, x = divmod(int(cand[rng.integers(cand.size)]), W)
        out.append((x, y))
        _suppress(allowed, x, y, radius)
    return out


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: object
    features: object = None


@dataclass
class Edge:
    patch: int                 # global patch id
    frame: int                 # frame index i the patch is projected into
    projected: np.ndarray = field(default_factory=lambda: np.zeros(2))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(2))   # diagonal


class PatchGraph:
    """Frames, live patches and (patch, frame) edges inside the window."""

    def __init__(self, cfg: PatchConfig = PatchConfig()):
        self.cfg = cfg
        self.frames: dict[int, FrameRecord] = {}
        self.patches: dict[int, Patch] = {}
        self.edges: dict[tuple[int, int], Edge] = {}
        self._next_patch = 0

    @property
    def last_frame(self):
        return max(self.frames) if self.frames else None

    def new_patch_id(self):
        pid = self._next_patch
        self._next_patch += 1
        return pid

    def add_frame(self, frame: FrameRecord, new_patches=()):
        """Insert frame ``j`` with its patches, connect the window, evict."""
        j = frame.index
        if self.frames and j != self.last_frame + 1:
            raise ValueError(f"frame {j} does not follow frame {self.last_frame}")
        lo = j - self.cfg.window_r
        self.frames[j] = frame
        for P in new_patches:
            if P.frame_index != j:
                raise ValueError(f"patch {P.patch_index} belongs to frame {P.frame_index}, not {j}")
            self.patches[P.patch_index] = P
        for i in [f for f in self.frames if f < lo]:
            del self.frames[i]
        for pid in [pid for pid, P in self.patches.items() if P.frame_index < lo]:
            del self.patches[pid]
        for key in [k for k in self.edges if k[0] not in self.patches or k[1] not in self.frames]:
            del self.edges[key]
        for P in new_patches:
            for i in self.frames:
                self.edges.setdefault((P.patch_index, i), Edge(P.patch_index, i))
        for pid, P in self.patches.items():
            if P.frame_index >= lo:
                self.edges.setdefault((pid, j), Edge(pid, j))
        return self

    def window(self):
        return sorted(self.frames)

    def live_inv_depths(self):
        return np.array([P.inv_depth for P in self.patches.values()])


def backfill_depth_init(graph: PatchGraph, new_patches):
    """Initialize new patches at the median inverse depth of live patches."""
    d = graph.live_inv_depths()
    init = float(np.median(d)) if d.size else 1.0
    for P in new_patches:
        P.inv_depth = init
    return new_patches
