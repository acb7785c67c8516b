"""Command-line entry point: ``ramp-odo {run,eval,synth,bench-encoder,selftest}``.

Exit codes: 0 success, 1 domain error (bad files, degenerate inputs),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .evaluation import DegenerateInputError, ate, auc_of_threshold, write_report
from .events import FormatError
from .formats import read_kv, read_tum

SEED_ENV = "RAMP_ODO_SEED"


class UsageError(Exception):
    pass


def _seed(args, default=0):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def match_by_time(est_t, gt_t, tol=1e-6):
    """Index pairs of estimate/ground-truth poses whose stamps agree."""
    gt_t = np.asarray(gt_t)
    pairs = []
    for n, t in enumerate(est_t):
        k = int(np.argmin(np.abs(gt_t - t)))
        if abs(gt_t[k] - t) <= tol:
            pairs.append((n, k))
    return pairs


def _ate_files(est_path, gt_path, rigid=False):
    te, pe = read_tum(est_path)
    tg, pg = read_tum(gt_path)
    if len(te) != len(tg):
        raise ValueError(f"trajectory lengths differ: {est_path} has {len(te)} poses, "
                         f"{gt_path} has {len(tg)}")
    return ate(pe, pg, with_scale=not rigid)


def cmd_run(args):
    from .pipeline import PipelineConfig, config_from_kv, run

    cfg = config_from_kv(read_kv(args.config)) if args.config else PipelineConfig()
    cfg = replace(cfg, seed=_seed(args, cfg.seed))
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.mode is not None:
        cfg = replace(cfg, correction_mode=args.mode)
    traj = run(args.frames, args.events, cfg, calib_path=args.calib, gt_path=args.gt,
               tracks_path=args.tracks)
    traj.write_tum(args.out)
    print(f"wrote {len(traj)} poses to {args.out}")
    if args.gt:
        tg, pg = read_tum(args.gt)
        pairs = match_by_time(traj.stamps, tg)
        if len(pairs) < 3:
            raise ValueError(f"only {len(pairs)} estimated poses match ground-truth timestamps")
        res = ate([traj.poses[a] for a, _ in pairs], [pg[b] for _, b in pairs])
        print(f"ATE_RMSE={res.ate_rmse:.9f}")
    return 0


def cmd_eval(args):
    if args.manifest:
        names, values = [], []
        with open(args.manifest) as fh:
            for line in fh:
                parts = line.split("#", 1)[0].split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise UsageError(f"manifest lines need 'name est gt': {line.strip()!r}")
                names.append(parts[0])
                values.append(_ate_files(parts[1], parts[2], args.rigid).ate_rmse)
        for n, v in zip(names, values):
            print(f"{n} ATE_RMSE={v:.9f}")
        print(f"AUC={auc_of_threshold(values, args.tau_max, args.n_grid):.9f}")
        if args.report_csv or args.report_json:
            write_report(args.report_csv or os.devnull, args.report_json or os.devnull, names, values,
                         args.tau_max, args.n_grid)
        return 0
    if not (args.est and args.gt):
        raise UsageError("eval needs --est and --gt, or --manifest")
    res = _ate_files(args.est, args.gt, args.rigid)
    print(f"ATE_RMSE={res.ate_rmse:.9f}")
    print(f"scale={res.scale:.9f}")
    return 0


def cmd_synth(args):
    from .synth import emit_dataset, make_dataset, SceneSpec, spec_from_kv

    items = read_kv(args.spec) if args.spec else {}
    try:
        spec = spec_from_kv(items)
    except KeyError as exc:
        raise UsageError(f"invalid spec key(s): {exc.args[0]}") from None
    except ValueError as exc:
        raise UsageError(f"invalid spec value: {exc}") from None
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        spec = replace(spec, seed=_seed(args, spec.seed))
    ds = make_dataset(spec)
    emit_dataset(ds, args.out)
    print(f"wrote {spec.n_frames} frames, {len(ds.events)} events to {args.out}")
    return 0


def cmd_bench(args):
    from .encoder import bench_encoder

    rep = bench_encoder(args.height, args.width, args.samples, args.workers, _seed(args),
                        reference=not args.no_reference, heads=tuple(args.heads))
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    return 1 if run_selftest(_seed(args)) else 0


def build_parser():
    p = argparse.ArgumentParser(prog="ramp-odo", description="Event and frame visual odometry.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="estimate a trajectory from a dataset directory")
    r.add_argument("--frames", required=True, help="directory of .pgm frames plus timestamps.txt")
    r.add_argument("--events", help="EVT0 event file")
    r.add_argument("--config", help="key=value pipeline configuration")
    r.add_argument("--calib", help="calibration file (default: calib.txt next to the frames)")
    r.add_argument("--out", required=True, help="output TUM trajectory")
    r.add_argument("--gt", help="ground-truth TUM trajectory; prints ATE_RMSE")
    r.add_argument("--tracks", help="ground-truth tracks CSV for oracle corrections")
    r.add_argument("--mode", choices=("oracle", "softargmax"), help="correction estimator")
    r.add_argument("--workers", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="ATE of a trajectory, or AUC over a manifest")
    e.add_argument("--est")
    e.add_argument("--gt")
    e.add_argument("--rigid", action="store_true", help="SE(3) instead of Sim(3) alignment")
    e.add_argument("--manifest", help="lines of 'name est.tum gt.tum'")
    e.add_argument("--tau-max", type=float, default=1.0)
    e.add_argument("--n-grid", type=int, default=100)
    e.add_argument("--report-csv")
    e.add_argument("--report-json")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", help="key=value scene specification")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    b = sub.add_parser("bench-encoder", help="time the encoder stages")
    b.add_argument("--width", type=int, default=640)
    b.add_argument("--height", type=int, default=480)
    b.add_argument("--workers", type=int, default=8)
    b.add_argument("--samples", type=int, default=20)
    b.add_argument("--heads", nargs="+", default=["m", "c"], choices=["m", "c"])
    b.add_argument("--no-reference", action="store_true")
    b.add_argument("--seed", type=int)
    b.set_defaults(fn=cmd_bench)

    t = sub.add_parser("selftest", help="run the embedded invariant checks")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DegenerateInputError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
