"""Event records, stream slicing, 5-bin event stacks and event synthesis from
intensity video through the threshold-crossing (event generation) model."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

N_BINS = 5
EVT_MAGIC = b"EVT0"
EVT_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
assert EVT_RECORD.itemsize == 16


class Event(NamedTuple):
    t: float
    x: int
    y: int
    polarity: int


class FormatError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, path=None, offset=None):
        where = f"{path}: " if path is not None else ""
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{msg}{at}")
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events stored column-wise."""

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        for name, dt in (("t", np.float64), ("x", np.uint16), ("y", np.uint16), ("p", np.int8)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dt)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if n and np.any(np.diff(self.t) < 0):
            raise ValueError("events must be nondecreasing in time")

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, width, height, events: Sequence[Event]):
        if not events:
            return cls.empty(width, height)
        t, x, y, p = (np.array(col) for col in zip(*events))
        return cls(width, height, t, x, y, p)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventStream(self.width, self.height, self.t[i], self.x[i], self.y[i], self.p[i])
        return Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def count_between(self, t0, t1):
        """Number of events with ``t0 < t <= t1``."""
        return int(np.searchsorted(self.t, t1, "right") - np.searchsorted(self.t, t0, "right"))


@dataclass(frozen=True)
class EventStack:
    data: np.ndarray  # N_BINS x H x W
    t_start: float
    t_end: float

    @property
    def bins(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def density(self):
        """Per-pixel activity, summed absolute bin values."""
        return np.abs(self.data).sum(axis=0)


def build_stack(events: EventStream, width, height, t_start, t_end) -> EventStack:
    """Accumulate signed polarities into 5 uniform temporal bins.

    Bins are half-open except the last, which is closed at ``t_end``.
    """
    if not t_end > t_start:
        raise ValueError(f"invalid window: t_end={t_end} <= t_start={t_start}")
    x = events.x.astype(np.int64)
    y = events.y.astype(np.int64)
    bad = np.flatnonzero((x >= width) | (y >= height))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"event {i} at ({x[i]}, {y[i]}) outside {width}x{height}")
    bad = np.flatnonzero((events.t < t_start) | (events.t > t_end))
    if bad.size:
        raise ValueError(f"event {int(bad[0])} at t={events.t[bad[0]]} outside [{t_start}, {t_end}]")
    b = np.floor(N_BINS * (events.t - t_start) / (t_end - t_start)).astype(np.int64)
    b = np.minimum(b, N_BINS - 1)
    flat = np.zeros(N_BINS * height * width)
    np.add.at(flat, (b * height + y) * width + x, events.p.astype(float))
    return EventStack(flat.reshape(N_BINS, height, width), float(t_start), float(t_end))


def slice_last_n(stream: EventStream, n, t) -> EventStream:
    """Up to ``n`` events with the largest timestamps ``<= t``, in time order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    hi = int(np.searchsorted(stream.t, t, "right"))
    return stream[max(0, hi - n):hi]


def stack_last_n(stream: EventStream, n, t):
    """Stack of the ``n`` events preceding ``t``; ``None`` when there are none."""
    ev = slice_last_n(stream, n, t)
    if len(ev) == 0:
        return None
    t0 = float(ev.t[0])
    t1 = float(t)
    if t1 <= t0:
        t0 = np.nextafter(t1, -np.inf)
    return build_stack(ev, stream.width, stream.height, t0, t1)


@dataclass(frozen=True)
class EgmConfig:
    contrast_threshold: float = 0.2
    log_eps: float = 1e-3

    def __post_init__(self):
        if not (self.contrast_threshold > 0 and self.log_eps > 0):
            raise ValueError("contrast_threshold and log_eps must be positive")


def synthesize_events(frames, cfg: EgmConfig = EgmConfig()) -> EventStream:
    """Generate events from ``(intensity, timestamp)`` pairs.

    Log intensity is interpolated linearly between frames.  Every pixel keeps
    a reference level on the lattice ``L0 + k C``; an event fires whenever the
    signal reaches the next lattice level, and the reference moves to exactly
    that level.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    shape = np.shape(frames[0][0])
    ts = np.array([float(t) for _, t in frames])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    C = cfg.contrast_threshold
    tol = 1e-9

    def log_frame(img):
        img = np.asarray(img, dtype=float)
        if img.shape != shape:
            raise ValueError(f"frame shape {img.shape} differs from {shape}")
        if np.any(img < 0):
            raise ValueError("negative intensity")
        return np.log(img + cfg.log_eps).ravel()

    H, W = shape
    L_prev = log_frame(frames[0][0])
    base = L_prev.copy()
    level = np.zeros(L_prev.shape, dtype=np.int64)
    chunks = []
    for k in range(1, len(frames)):
        L_next = log_frame(frames[k][0])
        t0, t1 = ts[k - 1], ts[k]
        pos = (L_next - base) / C - level
        n_up = np.where(pos > 0, np.floor(pos + tol), 0).astype(np.int64)
        n_dn = np.where(pos < 0, np.floor(-pos + tol), 0).astype(np.int64)
        n = n_up + n_dn
        pix = np.flatnonzero(n)
        if pix.size:
            counts = n[pix]
            sign = np.where(n_up[pix] > 0, 1, -1)
            rep = np.repeat(pix, counts)
            sgn = np.repeat(sign, counts)
            # k-th crossing index within each pixel's run, 1-based
            starts = np.cumsum(counts) - counts
            kk = np.arange(rep.size) - np.repeat(starts, counts) + 1
            lvl = base[rep] + (level[rep] + sgn * kk) * C
            dL = L_next[rep] - L_prev[rep]
            frac = np.clip((lvl - L_prev[rep]) / dL, 0.0, 1.0)
            tt = t0 + frac * (t1 - t0)
            chunks.append((tt, rep % W, rep // W, sgn))
            level[pix] += sign * counts
        L_prev = L_next
    if not chunks:
        return EventStream.empty(W, H)
    t = np.concatenate([c[0] for c in chunks])
    x = np.concatenate([c[1] for c in chunks])
    y = np.concatenate([c[2] for c in chunks])
    p = np.concatenate([c[3] for c in chunks])
    order = np.lexsort((p, x, y, t))
    return EventStream(W, H, t[order], x[order], y[order], p[order])


def write_evt(path, stream: EventStream):
    rec = np.zeros(len(stream), dtype=EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as fh:
        fh.write(EVT_MAGIC)
        fh.write(struct.pack("<IIQ", stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def read_evt(path) -> EventStream:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 20:
        raise FormatError("truncated header", path, len(buf))
    if buf[:4] != EVT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", path, 0)
    width, height, count = struct.unpack_from("<IIQ", buf, 4)
    need = 20 + 16 * count
    if len(buf) != need:
        raise FormatError(f"expected {count} records ({need} bytes), file has {len(buf)} bytes",
                          path, min(len(buf), need))
    rec = np.frombuffer(buf, dtype=EVT_RECORD, count=count, offset=20)
    bad = np.flatnonzero((rec["p"] != 1) & (rec["p"] != -1))
    if bad.size:
        raise FormatError(f"record {bad[0]} has polarity {rec['p'][bad[0]]}", path, 20 + 16 * int(bad[0]) + 12)
    bad = np.flatnonzero(np.diff(rec["t"]) < 0)
    if bad.size:
        raise FormatError(f"record {bad[0] + 1} goes back in time", path, 20 + 16 * int(bad[0] + 1))
    bad = np.flatnonzero((rec["x"] >= width) | (rec["y"] >= height))
    if bad.size:
        raise FormatError(f"record {bad[0]} outside {width}x{height}", path, 20 + 16 * int(bad[0]) + 8)
    return EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"])
