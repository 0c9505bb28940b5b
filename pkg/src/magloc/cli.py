"""``magloc`` command line.

Exit codes: 0 success, 2 config or input error, 3 stage failure, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, InvalidInputError, MapFormatError, MaglocError
from .evaluation import ALIGNMENTS, bench_matrix, compute_ate
from .experiment import METHODS, StageError, localize, run_experiment, section
from .mfmap import GpHyperparams, build_map, load_map, save_map
from .sim import generate_trajectory, simulate_frames, survey

log = logging.getLogger("magloc")


def _out(args, name) -> Path:
    p = Path(name)
    if args.out_dir and not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _ints(s: str):
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError("expected comma-separated integers, got %r" % s) from e


def cmd_build_map(args) -> int:
    pos, fld = io.read_samples(args.input)
    d = GpHyperparams()
    gp = GpHyperparams(
        length_scale=args.length_scale if args.length_scale is not None else d.length_scale,
        sigma_f=args.sigma_f if args.sigma_f is not None else d.sigma_f,
        sigma_n=args.sigma_n if args.sigma_n is not None else d.sigma_n,
        support_radius=args.support_radius if args.support_radius is not None else d.support_radius,
        min_neighbors=args.min_neighbors if args.min_neighbors is not None else d.min_neighbors,
        max_neighbors=args.max_neighbors if args.max_neighbors is not None else d.max_neighbors,
    )
    base = tuple(float(x) for x in args.base_field.split(","))
    m = build_map((pos, fld), args.resolution, gp, base_field=base)
    save_map(m, _out(args, args.out))
    print("built %d cells at %.3f m" % (len(m), m.resolution))
    return 0


def cmd_simulate(args) -> int:
    world = io.read_kv(args.world)
    sources, base, noise, sv, sv_sigma = io.world_from_kv(section(world, "world"))
    spec = io.traj_from_kv(section(io.read_kv(args.traj), "trajectory"))
    rig_kv = section(io.read_kv(args.rig), "rig") if args.rig else {"hex": "7", "hex_radius": "0.13"}
    rig = io.rig_from_kv(rig_kv)
    traj = generate_trajectory(spec)
    frames = simulate_frames(traj, rig, sources, base, noise, seed=args.seed)
    io.write_frames(_out(args, args.out), frames)
    io.write_truth(_out(args, args.truth), traj)
    if args.samples:
        if sv is None:
            raise ConfigError("field 'survey_bounds': world config has no survey for --samples")
        pos, fld = survey(sources, base, sv, sv_sigma, seed=args.seed)
        io.write_samples(_out(args, args.samples), pos, fld)
    print("wrote %d frames for %d sensors" % (len(frames), len(rig)))
    return 0


def cmd_localize(args) -> int:
    m = load_map(args.map)
    frames = io.read_frames(args.frames)
    rig = io.rig_from_kv(section(io.read_kv(args.rig), "rig"))
    est_kv = section(io.read_kv(args.config), "estimator") if args.config else {}
    init = io.read_truth(args.init)
    if not init:
        raise InvalidInputError("initial-state file is empty")
    initial = init[0][1]
    frames = [f for f in frames if f.t > initial.t]
    try:
        est = localize(args.method, frames, initial, m, rig, est_kv, args.seed)
    except (ConfigError, InvalidInputError, MapFormatError):
        raise
    except MaglocError as e:
        raise StageError("localize", e) from e
    io.write_estimates(_out(args, args.out), est)
    failures = sum(1 for _, d in est if d.failed)
    print("localized %d frames with %s (%d failed steps)" % (len(est), args.method, failures))
    return 0


def cmd_evaluate(args) -> int:
    est = io.read_estimates(args.est)
    truth = io.read_truth(args.truth)
    failures = sum(1 for _, d in est if d.failed)
    rep = compute_ate([x for x, _ in est], [x for _, x in truth], failure_steps=failures, align=args.align)
    d = rep.as_dict()
    if args.out:
        io.write_kv(_out(args, args.out), {"ate": d})
    for k, v in d.items():
        print("%s = %s" % (k, io.format_value(v)))
    return 0


def cmd_bench(args) -> int:
    rep = bench_matrix(_ints(args.M), _ints(args.N), reps=args.reps, seed=args.seed)
    sections = {}
    for r in rep.rows:
        sections["M%d.N%d" % (r["M"], r["N"])] = r
        print("M=%5d N=%3d mean=%8.3f ms p99=%8.3f ms" % (r["M"], r["N"], r["mean"] * 1e3, r["p99"] * 1e3))
    sections["fit"] = {"slope_m": rep.slope_m, "r2_m": rep.r2_m, "slope_n": rep.slope_n, "r2_n": rep.r2_n}
    if args.out:
        io.write_kv(_out(args, args.out), sections)
    return 0


def cmd_run(args) -> int:
    methods = tuple(args.methods.split(",")) if args.methods else None
    res = run_experiment(args.config, out_dir=args.out_dir or "magloc_out", seed=args.seed, methods=methods,
                         threads=args.threads)
    for m, s in res.summary().items():
        print("%-16s median ATE %.4f m  median vel RMSE %.4f m/s  failures %d" % (
            m, s["median_ate"], s["median_velocity_rmse"], s["failure_steps"]))
    print("artifacts in %s (%.1f s)" % (res.out_dir, res.elapsed))
    return 0


def _global_flags(p, default):
    def d(v):
        return v if default is None else default
    p.add_argument("--seed", type=int, default=d(0), help="master seed")
    p.add_argument("--out-dir", default=d(None), help="directory for relative output paths")
    p.add_argument("--threads", type=int, default=d(1), help="concurrent seed runs for 'run'")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magloc", description="Magnetic-field map localization toolkit")
    _global_flags(p, None)
    common = argparse.ArgumentParser(add_help=False)
    # repeated after the subcommand; SUPPRESS keeps values given before it
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-map", parents=[common], help="densify survey samples into a map file")
    b.add_argument("--input", required=True, help="samples.csv (px,py,pz,bx,by,bz)")
    b.add_argument("--resolution", type=float, default=0.05)
    b.add_argument("--out", required=True)
    b.add_argument("--base-field", default="20,0,-45", help="GP prior mean, uT")
    b.add_argument("--length-scale", type=float)
    b.add_argument("--sigma-f", type=float)
    b.add_argument("--sigma-n", type=float)
    b.add_argument("--support-radius", type=float)
    b.add_argument("--min-neighbors", type=int)
    b.add_argument("--max-neighbors", type=int)
    b.set_defaults(fn=cmd_build_map)

    s = sub.add_parser("simulate", parents=[common], help="synthesize frames and ground truth")
    s.add_argument("--world", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--rig", help="rig.cfg (default: 7-sensor hexagonal rig)")
    s.add_argument("--out", required=True, help="frames.csv")
    s.add_argument("--truth", required=True, help="truth.csv")
    s.add_argument("--samples", help="also write a mapping survey to this samples.csv")
    s.set_defaults(fn=cmd_simulate)

    l = sub.add_parser("localize", parents=[common], help="estimate a trajectory from frames")
    l.add_argument("--map", required=True)
    l.add_argument("--frames", required=True)
    l.add_argument("--rig", required=True)
    l.add_argument("--config", help="estimator config (est.cfg)")
    l.add_argument("--init", required=True, help="CSV in truth.csv format; its first row is the initial state")
    l.add_argument("--method", choices=METHODS, default="idfmfl")
    l.add_argument("--out", required=True)
    l.set_defaults(fn=cmd_localize)

    e = sub.add_parser("evaluate", parents=[common], help="ATE of an estimate against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out")
    e.add_argument("--align", choices=ALIGNMENTS, default="none", help="trajectory alignment before scoring")
    e.set_defaults(fn=cmd_evaluate)

    k = sub.add_parser("bench", parents=[common], help="estimate_step latency matrix")
    k.add_argument("--M", default="256,1024,4096")
    k.add_argument("--N", default="1,7,14")
    k.add_argument("--reps", type=int, default=50)
    k.add_argument("--out")
    k.set_defaults(fn=cmd_bench)

    r = sub.add_parser("run", parents=[common], help="full pipeline from a scene file")
    r.add_argument("--config", required=True, help="scene file or bundled name (quickstart.cfg, warehouse.cfg, flat.cfg)")
    r.add_argument("--methods", help="comma-separated override of the scene's methods")
    r.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.fn(args)
    except StageError as e:
        print("error: %s" % e, file=sys.stderr)
        return 3
    except (ConfigError, InvalidInputError) as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except (MapFormatError, OSError) as e:
        print("i/o error: %s" % e, file=sys.stderr)
        return 4
    except MaglocError as e:
        print("error: %s" % e, file=sys.stderr)
        return getattr(e, "exit_code", 3)


if __name__ == "__main__":
    sys.exit(main())
