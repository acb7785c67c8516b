"""Plain file formats: binary PGM frames, TUM trajectories, CSV tracks and
flat ``key=value`` configuration text."""

from __future__ import annotations

import csv
import re

import numpy as np

from .events import FormatError
from .geometry import Se3Pose


def write_pgm(path, img):
    """Write an intensity image in [0, 1] as 8-bit binary PGM (P5)."""
    a = np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    H, W = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path):
    """Read a binary PGM into floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header", path, pos)
        fields.append(m.group(2))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0]!r})", path, 0)
    try:
        W, H, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("bad PGM header values", path, pos) from None
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported maxval {maxval}", path, pos)
    pos += 1
    if len(buf) - pos < W * H:
        raise FormatError(f"expected {W * H} pixel bytes, found {len(buf) - pos}", path, len(buf))
    a = np.frombuffer(buf, np.uint8, W * H, pos).reshape(H, W)
    return a.astype(float) / maxval


def format_tum_line(t, T: Se3Pose):
    q, p = T.rotation, T.translation
    vals = " ".join(f"{v:.12g}" for v in (*p, *q))
    return f"{t:.17g} {vals}"


def write_tum(path, stamps, poses):
    with open(path, "w") as fh:
        for t, T in zip(stamps, poses):
            fh.write(format_tum_line(t, T) + "\n")


def read_tum(path):
    stamps, poses = [], []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", "replace").strip()
            if line and not line.startswith("#"):
                parts = line.split()
                if len(parts) != 8:
                    raise FormatError(f"TUM line needs 8 fields, got {len(parts)}", path, offset)
                try:
                    v = [float(x) for x in parts]
                except ValueError:
                    raise FormatError("non-numeric TUM field", path, offset) from None
                stamps.append(v[0])
                poses.append(Se3Pose(np.array(v[4:8]), np.array(v[1:4])))
            offset += len(raw)
    return np.array(stamps), poses


TRACK_HEADER = ["frame", "point_id", "x", "y", "inv_depth"]


def write_tracks(path, rows):
    """Rows of (frame, point_id, x, y, inv_depth)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for f, pid, x, y, d in rows:
            w.writerow([int(f), int(pid), repr(float(x)), repr(float(y)), repr(float(d))])


def read_tracks(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != TRACK_HEADER:
            raise FormatError(f"unexpected tracks header {header}", path, 0)
        rows = [(int(a), int(b), float(c), float(d), float(e)) for a, b, c, d, e in r]
    return rows


def read_kv(path):
    """Flat ``key=value`` text; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"line {n}: expected key=value", path)
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, items):
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def parse_value(text, like):
    """Convert ``text`` to the type of the default ``like``."""
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(float(text)) if re.fullmatch(r"[-+]?\d+(\.0*)?(e\+?\d+)?", text, re.I) else int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in re.split(r"[,\s]+", text) if p]
        return tuple(parse_value(p, like[0] if like else 0.0) for p in parts)
    return text
