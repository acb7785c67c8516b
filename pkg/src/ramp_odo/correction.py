"""Per-edge corrections and confidence weights.

Two estimators share one output type: a correlation/soft-argmax baseline
that works from matching features, and a ground-truth oracle for synthetic
data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MAX = 1e4
FEATURE_STRIDE = 4


@dataclass(frozen=True)
class CorrectionEstimate:
    delta: np.ndarray   # (2,) pixels
    sigma: np.ndarray   # (2,) diagonal of the 2x2 weight

    @property
    def sigma_matrix(self):
        return np.diag(self.sigma)


@dataclass(frozen=True)
class CorrelationGrid:
    radius: int
    scores: np.ndarray     # (2R+1, 2R+1), indexed [dy + R, dx + R]
    masked: bool = False


def bilinear_sample(fmap, xy):
    """Sample a (C, H, W) map at float positions ``xy`` (..., 2) -> (..., C).

    Points outside the map read zeros beyond the border.
    """
    C, H, W = fmap.shape
    x, y = xy[..., 0], xy[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ax, ay = x - x0, y - y0
    flat = fmap.reshape(C, -1)
    out = 0.0
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = np.where(ok, yi * W + xi, 0)
            vals = flat[:, idx] * ok
            out = out + np.moveaxis(vals, 0, -1) * (wx * wy)[..., None]
    return out


def _offsets(R):
    o = np.arange(-R, R + 1)
    oy, ox = np.meshgrid(o, o, indexing="ij")
    return np.stack([ox, oy], axis=-1).astype(float)   # (2R+1, 2R+1, 2) as (dx, dy)


def in_margin(shape, center_f, R):
    _, H, W = shape
    x, y = center_f[..., 0], center_f[..., 1]
    return (x >= R) & (x <= W - 1 - R) & (y >= R) & (y <= H - 1 - R)


def correlation_lookup(m_i, m_j, source_xy, projected_center, R=3) -> CorrelationGrid:
    """Dot products of the source feature with the target map around the
    projected center, at integer feature-resolution offsets."""
    c = np.asarray(projected_center, dtype=float) / FEATURE_STRIDE
    if not in_margin(m_i.shape, c, R):
        return CorrelationGrid(R, np.zeros((2 * R + 1, 2 * R + 1)), True)
    src = bilinear_sample(m_j, np.asarray(source_xy, dtype=float) / FEATURE_STRIDE)
    tgt = bilinear_sample(m_i, c + _offsets(R))
    return CorrelationGrid(R, tgt @ src)


def correlation_lookup_batch(m_i, src_feats, projected_centers, R=3, pixel_major=None):
    """Batched lookup against one target map.

    ``src_feats`` (E, C) are pre-sampled source features.  ``pixel_major`` is
    an optional cached ``(H*W, C)`` copy of ``m_i``.  Returns scores
    (E, 2R+1, 2R+1) and a mask of out-of-margin edges.
    """
    c = np.asarray(projected_centers, dtype=float) / FEATURE_STRIDE
    masked = ~in_margin(m_i.shape, c, R)
    # bilinear interpolation commutes with the dot product: correlate on the
    # integer lattice once, then interpolate the scores
    base = np.floor(c).astype(np.int64)
    frac = c - base
    C, H, W = m_i.shape
    n = 2 * R + 2
    o = np.arange(-R, R + 2)
    gy = np.clip(base[:, 1, None] + o[None, :], 0, H - 1)
    gx = np.clip(base[:, 0, None] + o[None, :], 0, W - 1)
    flat = np.ascontiguousarray(m_i.reshape(C, -1).T) if pixel_major is None else pixel_major
    idx = gy[:, :, None] * W + gx[:, None, :]                  # (E, n, n)
    gathered = flat[idx.reshape(len(c), -1)]                    # (E, n*n, C)
    src = np.asarray(src_feats, dtype=gathered.dtype)[:, :, None]
    lattice = np.matmul(gathered, src).reshape(len(c), n, n).astype(float)
    ax, ay = frac[:, 0, None, None], frac[:, 1, None, None]
    scores = ((1 - ay) * ((1 - ax) * lattice[:, :-1, :-1] + ax * lattice[:, :-1, 1:])
              + ay * ((1 - ax) * lattice[:, 1:, :-1] + ax * lattice[:, 1:, 1:]))
    scores[masked] = 0.0
    return scores, masked


def softargmax(scores, tau=0.1, eps=1e-3, masked=None):
    """Soft-argmax over (..., 2R+1, 2R+1) grids; returns (delta, sigma) arrays."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[-1]
    R = (n - 1) // 2
    off = _offsets(R)
    z = scores.reshape(scores.shape[:-2] + (-1,)) / tau
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    ox, oy = off[..., 0].ravel(), off[..., 1].ravel()
    mx, my = w @ ox, w @ oy
    vx = w @ ox**2 - mx**2
    vy = w @ oy**2 - my**2
    delta = FEATURE_STRIDE * np.stack([mx, my], axis=-1)
    sigma = np.minimum(np.stack([1 / (eps + np.maximum(vx, 0)), 1 / (eps + np.maximum(vy, 0))], -1),
                       SIGMA_MAX)
    if masked is not None:
        masked = np.asarray(masked, bool)
        delta = np.where(masked[..., None], 0.0, delta)
        sigma = np.where(masked[..., None], 0.0, sigma)
    return delta, sigma


def estimate_softargmax(grid: CorrelationGrid, tau=0.1) -> CorrectionEstimate:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if grid.masked:
        return CorrectionEstimate(np.zeros(2), np.zeros(2))
    delta, sigma = softargmax(grid.scores, tau)
    return CorrectionEstimate(delta, sigma)


def estimate_oracle(gt_track, projected_center, noise_std=0.0, rng=None) -> CorrectionEstimate:
    delta = np.asarray(gt_track, dtype=float) - np.asarray(projected_center, dtype=float)
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        delta = delta + rng.normal(0.0, noise_std, size=delta.shape)
    return CorrectionEstimate(delta, np.ones(2))
