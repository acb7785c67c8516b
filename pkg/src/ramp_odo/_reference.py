"""Serial reference for the pixel-wise encoder stages.

Scales are visited one after another and every pixel is updated on its own,
one channel at a time.  It computes the same function as the tiled path and
exists as the timing baseline and as a numerical cross-check.
"""

import math

import numpy as np
from numba import njit

from .encoder import FusionState


@njit(cache=True)
def _pixel_scale(f, h, c, sig, Wl, bl, Wf, bf, h_out, c_out, s_out):
    # pixel-major (P, C) arrays so each pixel's channels are contiguous
    P, C = h.shape
    gates = np.empty(4 * C, np.float32)
    for p in range(P):
        for r in range(4 * C):
            acc = bl[r]
            for q in range(C):
                acc += Wl[r, q] * f[p, q]
            for q in range(C):
                acc += Wl[r, C + q] * h[p, q]
            gates[r] = acc
        for q in range(C):
            i = 1.0 / (1.0 + math.exp(-gates[q]))
            fg = 1.0 / (1.0 + math.exp(-gates[C + q]))
            o = 1.0 / (1.0 + math.exp(-gates[2 * C + q]))
            g = math.tanh(gates[3 * C + q])
            cn = fg * c[p, q] + i * g
            c_out[p, q] = cn
            h_out[p, q] = o * math.tanh(cn)
        for r in range(C):
            acc = bf[r]
            for q in range(C):
                acc += Wf[r, q] * h_out[p, q]
            for q in range(C):
                acc += Wf[r, C + q] * sig[p, q]
            s_out[p, r] = math.tanh(acc)


def sequential_pixel_stages(enc, state: FusionState, sample, feats=None):
    """Intra- and inter-sensor fusion for one sample, serially per pixel."""
    if feats is None:
        feats = enc.sensor_encode(sample)
    k = sample.sensor
    new_h, new_c, sigma = dict(state.h), dict(state.c), []
    for s, f in enumerate(feats):
        h, c, sig = state.h[(k, s)], state.c[(k, s)], state.sigma[s]
        C, Hs, Ws = h.shape
        P = Hs * Ws
        ho = np.empty((P, C), np.float32)
        co = np.empty((P, C), np.float32)
        so = np.empty((P, C), np.float32)
        w = enc.weights

        def pm(a):
            return np.ascontiguousarray(a.reshape(C, P).T)

        _pixel_scale(pm(f), pm(h), pm(c), pm(sig), w[f"lstm.{k}.s{s}.w"], w[f"lstm.{k}.s{s}.b"],
                     w[f"fuse.{k}.s{s}.w"], w[f"fuse.{k}.s{s}.b"], ho, co, so)
        new_h[(k, s)] = np.ascontiguousarray(ho.T).reshape(C, Hs, Ws)
        new_c[(k, s)] = np.ascontiguousarray(co.T).reshape(C, Hs, Ws)
        sigma.append(np.ascontiguousarray(so.T).reshape(C, Hs, Ws))
    return FusionState(new_h, new_c, sigma, float(sample.timestamp))
