"""Command-line interface.

Subcommands: fit, bench scaling, approx, geom, calibrate.  Exit code 0 on
success, 2 when an acceptance threshold embedded in the invocation fails,
1 on error.  CONVREG_SEED overrides the configured seed.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import bench, norms, pipeline
from .geom import HPolytope, regular_simplex
from .pipeline import PipelineConfig, full_estimator, simplicial_approximation
from .sampling import Dataset, RngStream


def _seed(args):
    env = os.environ.get("CONVREG_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _cmd_fit(args):
    data = Dataset.from_csv(args.data)
    d = data.d
    cfg = (PipelineConfig.from_text(open(args.config).read())
           if args.config else PipelineConfig(d=d, n=data.n))
    cfg.d, cfg.n = d, data.n
    cfg.mode = args.mode
    if args.L is not None:
        cfg.L = args.L
    if args.gamma is not None:
        cfg.gamma = args.gamma
    if args.sigma is not None:
        cfg.sigma = args.sigma
    cfg.seed = _seed(args)
    cfg.uncalibrated = args.uncalibrated
    omega = HPolytope.from_simplex(regular_simplex(d)) if args.support == "simplex" \
        else HPolytope.box(data.X.min(axis=0) - 1e-9, data.X.max(axis=0) + 1e-9)
    model, report = full_estimator(data, omega, cfg, RngStream(cfg.seed))
    model.save(args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    print(f"model written to {args.out} "
          f"(pieces {model.n_pieces}, lipschitz {model.lipschitz:.4g})")
    return 0


def _cmd_bench_scaling(args):
    grid = [int(v) for v in args.grid.split(",")]
    curve = bench.scaling_study(args.estimator, args.d, args.truth, grid,
                                args.seeds, sigma=args.sigma, seed=_seed(args))
    with open(args.out, "w") as fh:
        fh.write(curve.to_json())
    print(f"slope {curve.slope:.3f} +- {curve.slope_ci:.3f} "
          f"(degenerate {curve.degenerate})")
    if args.svg:
        bench.save_curve_svg(curve, args.svg,
                             reference_slope=args.reference_slope)
    if args.expect_slope is not None:
        lo, hi = (args.expect_slope - args.expect_tol,
                  args.expect_slope + args.expect_tol)
        if not (lo <= curve.slope <= hi):
            print(f"threshold failed: slope outside [{lo:.3f}, {hi:.3f}]")
            return 2
    return 0


def _cmd_approx(args):
    ks = [int(v) for v in args.k.split(",")]
    d = args.d
    omega = HPolytope.from_simplex(regular_simplex(d))
    rng = RngStream(_seed(args))

    center = regular_simplex(d).barycenter

    def f(X):
        return 0.5 * ((X - center) ** 2).sum(axis=1)

    rows = []
    for k in ks:
        per_seed = []
        for s in range(args.seeds):
            decomp, env = simplicial_approximation(
                f, omega, k, rng.substream(k * 101 + s))
            probes = bench.sample_polytope(omega, 2000,
                                           rng.substream(k * 101 + s + 50))[0]
            covered = env.covers(probes)
            err = (env(probes[covered]) - f(probes[covered]))
            per_seed.append({"mse": float((err ** 2).mean()),
                             "uncovered": decomp.complement_volume_fraction,
                             "pieces": len(decomp)})
        rows.append({"k": k,
                     "mse": float(np.mean([r["mse"] for r in per_seed])),
                     "uncovered": float(np.mean([r["uncovered"] for r in per_seed])),
                     "pieces": float(np.mean([r["pieces"] for r in per_seed]))})
        print(f"k={k} mse={rows[-1]['mse']:.4g} "
              f"uncovered={rows[-1]['uncovered']:.4g}")
    slope = float(np.polyfit(np.log([r["k"] for r in rows]),
                             np.log([r["mse"] for r in rows]), 1)[0])
    payload = {"d": d, "rows": rows, "slope": slope, "seed": _seed(args)}
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"error slope vs k: {slope:.3f}")
    return 0


def _cmd_geom(args):
    grid = [int(v) for v in args.grid.split(",")] if args.grid else None
    if grid is None:
        grid = {"facets": [256, 512, 1024, 2048, 4096, 8192],
                "coverage": [64, 128, 256, 512, 1024],
                "wetpart": [0]}[args.experiment]
    res = bench.geo_experiments(args.experiment, args.d, grid, args.seeds,
                                RngStream(_seed(args)))
    with open(args.out, "w") as fh:
        fh.write(res.to_json())
    if res.exponent is not None:
        print(f"fitted exponent {res.exponent:.3f}")
    return 0


def _cmd_calibrate(args):
    entry = norms.calibrate(args.d, m=args.m, seed=_seed(args),
                            progress=print)
    dims = {}
    if os.path.exists(args.out):
        with open(args.out) as fh:
            dims = {int(k): v for k, v in json.load(fh).get("dims", {}).items()}
    dims[args.d] = entry
    norms.save_calibration(dims, args.out)
    print(f"calibration for d={args.d} written to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="convreg")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    f = sub.add_parser("fit", help="fit the full estimator to a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--mode", choices=["lipschitz", "bounded"],
                   default="lipschitz")
    f.add_argument("--L", type=float, default=None)
    f.add_argument("--gamma", type=float, default=None)
    f.add_argument("--sigma", type=float, default=None)
    f.add_argument("--config", default=None)
    f.add_argument("--support", choices=["box", "simplex"], default="box")
    f.add_argument("--out", required=True)
    f.add_argument("--report", default=None)
    f.add_argument("--uncalibrated", action="store_true")
    f.set_defaults(func=_cmd_fit)

    b = sub.add_parser("bench", help="benchmark suites")
    bsub = b.add_subparsers(dest="bench_cmd", required=True)
    s = bsub.add_parser("scaling")
    s.add_argument("--estimator", required=True,
                   choices=["full", "simplified", "lse", "oracle-truth",
                            "best-affine-oracle"])
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--truth", default="max-affine:3")
    s.add_argument("--grid", required=True)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.add_argument("--svg", default=None)
    s.add_argument("--reference-slope", type=float, default=None)
    s.add_argument("--expect-slope", type=float, default=None)
    s.add_argument("--expect-tol", type=float, default=0.15)
    s.set_defaults(func=_cmd_bench_scaling)

    a = sub.add_parser("approx", help="simplicial approximation study")
    a.add_argument("--d", type=int, required=True)
    a.add_argument("--k", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_approx)

    g = sub.add_parser("geom", help="stochastic-geometry experiments")
    g.add_argument("--experiment", required=True,
                   choices=["facets", "coverage", "wetpart"])
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--grid", default=None)
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_geom)

    c = sub.add_parser("calibrate", help="write the norm-estimator "
                       "calibration file")
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--m", type=int, default=100_000)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_calibrate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:       # error exit contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
