"""Small embedded invariant suite run by ``ramp-odo selftest``."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .ba import BaProblem, normal_equations, residuals, schur_step
from .correction import softargmax
from .evaluation import auc_of_threshold, umeyama_align
from .events import EgmConfig, EventStream, read_evt, synthesize_events, write_evt
from .forecast import extrapolation_coefficients, fit_track_spline, poly_eval
from .formats import read_pgm, read_tum, write_pgm, write_tum
from .geometry import Intrinsics, Patch, Se3Pose, jacobians, project_patch
from .weights import EncoderConfig, init_weights, read_rta, write_rta


def _random_pose(rng, trans=0.2, rot=0.1):
    return Se3Pose.exp(np.concatenate([rng.normal(0, trans, 3), rng.normal(0, rot, 3)]))


def check_jacobians(rng):
    K = Intrinsics(200.0, 210.0, 160.0, 120.0)
    worst = 0.0
    for _ in range(10):
        Ti, Tj = _random_pose(rng), _random_pose(rng)
        P = Patch.around(0, 0, rng.uniform([60, 40], [260, 200]), rng.uniform(0.1, 1.0))
        Ji, Jj, Jd = jacobians(Ti, Tj, K, P)
        h = 1e-6
        for J, bump in ((Ji, lambda e: (Ti.retract(e), Tj, P.inv_depth)),
                        (Jj, lambda e: (Ti, Tj.retract(e), P.inv_depth))):
            for c in range(6):
                e = np.zeros(6)
                e[c] = h
                a = project_patch(*bump(e)[:2], K, Patch(0, 0, P.coords, P.inv_depth)).center
                b = project_patch(*bump(-e)[:2], K, Patch(0, 0, P.coords, P.inv_depth)).center
                worst = max(worst, np.max(np.abs((a - b) / (2 * h) - J[:, c])) / (1 + np.max(np.abs(J))))
        a = project_patch(Ti, Tj, K, Patch(0, 0, P.coords, P.inv_depth + h)).center
        b = project_patch(Ti, Tj, K, Patch(0, 0, P.coords, P.inv_depth - h)).center
        worst = max(worst, np.max(np.abs((a - b) / (2 * h) - Jd[:, 0])) / (1 + np.max(np.abs(Jd))))
    return worst < 1e-5, f"max scaled error {worst:.2e}"


def check_schur(rng):
    K = Intrinsics(200.0, 200.0, 160.0, 120.0)
    poses = [_random_pose(rng, 0.1, 0.05) for _ in range(3)]
    n = 6
    centers = rng.uniform([40, 40], [280, 200], (n, 2))
    pf = np.arange(n) % 3
    ek, ei = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(3), indexing="ij"))
    prob = BaProblem(poses, rng.uniform(0.1, 0.5, n), centers, pf, ek, ei,
                     rng.uniform([0, 0], [320, 240], (len(ek), 2)), np.ones((len(ek), 2)), K, n_fixed=1)
    ne = normal_equations(prob)
    H = np.block([[ne.B, ne.E], [ne.E.T, np.diag(ne.C)]])
    g = np.concatenate([ne.v, ne.w])
    lam = 1e-3
    x = np.linalg.solve(H + lam * np.diag(np.diag(H)), g)
    dxi, dd = schur_step(ne, lam)
    y = np.concatenate([dxi.ravel(), dd])
    err = np.linalg.norm(x - y) / np.linalg.norm(x)
    residuals(prob)
    return err < 1e-8, f"relative difference {err:.2e}"


def check_egm(rng):
    H, W = 12, 16
    yy, xx = np.mgrid[0:H, 0:W]
    frames = [(0.5 + 0.4 * np.sin(0.3 * xx + 0.2 * yy + 0.5 * k), 0.1 * k) for k in range(6)]
    cfg = EgmConfig()
    ev = synthesize_events(frames, cfg)
    net = np.zeros((H, W))
    np.add.at(net, (ev.y.astype(int), ev.x.astype(int)), ev.p)
    dL = np.log(frames[-1][0] + cfg.log_eps) - np.log(frames[0][0] + cfg.log_eps)
    worst = np.max(np.abs(cfg.contrast_threshold * net - dL))
    const = synthesize_events([(np.full((H, W), 0.5), 0.0), (np.full((H, W), 0.5), 1.0)], cfg)
    ok = worst < cfg.contrast_threshold and len(const) == 0
    return ok, f"max residual {worst:.3f}, constant video events {len(const)}"


def check_softargmax(rng):
    g = np.zeros((7, 7))
    g[3 - 1, 3 + 2] = 10.0
    d, s = softargmax(g, tau=0.01)
    ok = np.allclose(d, [8, -4], atol=1e-6) and np.all(s > 0.9e3)
    return ok, f"delta {d}"


def check_eval(rng):
    auc = auc_of_threshold([0.1, 0.3, 0.5], 1.0, 10)
    X = rng.normal(size=(20, 3))
    R = Se3Pose.exp(np.r_[0, 0, 0, rng.normal(size=3)]).R
    Y = 2.5 * X @ R.T + np.array([1.0, -2.0, 0.5])
    res = umeyama_align(X, Y)
    ok = abs(auc - 0.8) < 1e-12 and abs(res.scale - 2.5) < 1e-9 and res.ate_rmse < 1e-9
    return ok, f"AUC {auc:.6f}, scale {res.scale:.9f}"


def check_spline(rng):
    t = np.sort(rng.uniform(0, 1, 6)) + np.arange(6)
    kn = np.stack([t, rng.normal(size=6), rng.normal(size=6)], -1)
    sp = fit_track_spline(kn)
    err = np.max(np.abs(sp(t) - kn[:, 1:]))
    h = 0.7
    c = extrapolation_coefficients(sp(t[-1]), sp(t[-1], 1), h, "stationary")
    cons = max(np.max(np.abs(poly_eval(c, h, 1))), np.max(np.abs(poly_eval(c, h, 2))))
    return err < 1e-9 and cons < 1e-9, f"knot error {err:.1e}, end constraints {cons:.1e}"


def check_formats(rng):
    with tempfile.TemporaryDirectory() as d:
        ev = EventStream(8, 6, np.sort(rng.uniform(0, 1, 50)), rng.integers(0, 8, 50),
                         rng.integers(0, 6, 50), rng.choice([-1, 1], 50))
        write_evt(os.path.join(d, "e.evt"), ev)
        ev2 = read_evt(os.path.join(d, "e.evt"))
        ok = all(np.array_equal(getattr(ev, k), getattr(ev2, k)) for k in "txyp")
        w = init_weights(EncoderConfig(), 0)
        write_rta(os.path.join(d, "w.rta"), w)
        w2 = read_rta(os.path.join(d, "w.rta"))
        ok &= all(np.array_equal(w[k], w2[k]) for k in w)
        img = rng.uniform(0, 1, (6, 8))
        write_pgm(os.path.join(d, "f.pgm"), img)
        ok &= np.max(np.abs(read_pgm(os.path.join(d, "f.pgm")) - img)) <= 0.5 / 255 + 1e-12
        poses = [_random_pose(rng) for _ in range(3)]
        write_tum(os.path.join(d, "t.tum"), [0.1, 0.2, 0.3], poses)
        _, back = read_tum(os.path.join(d, "t.tum"))
        ok &= all(np.allclose(a.matrix(), b.matrix(), atol=1e-9) for a, b in zip(poses, back))
    return bool(ok), "EVT0, RTA1, PGM, TUM"


CHECKS = [
    ("jacobians", check_jacobians),
    ("schur", check_schur),
    ("egm", check_egm),
    ("softargmax", check_softargmax),
    ("eval", check_eval),
    ("spline", check_spline),
    ("formats", check_formats),
]


def run_selftest(seed=0, out=print):
    failures = 0
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:   # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return failures
