"""Command-line entry point: train, oracle, eval-grid, compare, rollout, diagnose."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import critic as cr
from . import evalcli as ev
from .dynamics import PLANT_IDS, make_plant
from .oracle import GridSpec, read_table_csv, value_iteration, write_table_csv
from .trainer import load_config, parse_config, train

EXIT_THRESHOLD = 2


def _load_run(path):
    bundle, manifest = cr.load_bundle(path)
    plant = make_plant(manifest.get("plant", "double_integrator"), manifest["dt"])
    return bundle, manifest, plant


def _parse_reference(text: str):
    kind, _, arg = text.partition(":")
    if kind == "bang_bang":
        return ev.Reference.bang_bang(float(arg or 2.0))
    if kind == "constant":
        return ev.Reference.constant([float(a) for a in arg.split(",")] if arg else [0.0])
    if kind == "ou":
        return ev.Reference.ou()
    raise argparse.ArgumentTypeError(f"unknown reference {text!r}")


def cmd_train(args) -> int:
    overrides = {"plant": args.plant, "total_steps": args.steps, "seed": args.seed,
                 "buffer_capacity": args.buffer_capacity, "dt": args.dt}
    if args.hidden:
        overrides["hidden"] = tuple(int(h) for h in args.hidden.split(","))
    cfg = load_config(args.config, **overrides) if args.config else parse_config("", **overrides)
    state = train(cfg, out_dir=args.out)
    last = state.metrics[-1] if state.metrics else {}
    print(json.dumps({"steps": state.step, "out": args.out, **{k: last.get(k) for k in ("loss_v", "violations")}}))
    return 0


def cmd_oracle(args) -> int:
    plant = make_plant(args.plant, args.dt)
    grid = GridSpec.parse(args.grid, u_samples=args.u_samples)
    lam = args.lam if args.lam is not None else args.lambda_dt / args.dt
    table = value_iteration(plant, grid, lam, tol=args.tol, max_iters=args.max_iters)
    write_table_csv(args.out, table)
    print(json.dumps(table.metadata()))
    return 0


def cmd_eval_grid(args) -> int:
    bundle, _, _ = _load_run(args.run)
    dump = ev.eval_grid(bundle, GridSpec.parse(args.grid))
    ev.write_grid_csv(args.out, dump)
    print(f"{len(dump)} nodes -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    bundle, _, _ = _load_run(args.run)
    oracle = read_table_csv(args.oracle)
    if args.grid:
        oracle = ev.resample(oracle, GridSpec.parse(args.grid))
    rep = ev.compare_oracle(ev.eval_grid(bundle, oracle.grid), oracle, args.dead_band)
    out = {"sign_agreement": rep.sign_agreement, "safe_set_iou": rep.safe_set_iou,
           "rmse_safe_region": rep.rmse_safe_region}
    print(json.dumps(out))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=2)
    ok = rep.sign_agreement >= args.min_sign and rep.safe_set_iou >= args.min_iou
    return 0 if ok else EXIT_THRESHOLD


def cmd_rollout(args) -> int:
    bundle, _, plant = _load_run(args.run)
    x0 = np.array([float(a) for a in args.x0.split(",")])
    logr = ev.filter_rollout(bundle, plant, x0, args.reference, args.alpha,
                             args.horizon, seed=args.seed)
    if args.out:
        ev.write_rollout_csv(args.out, logr)
    print(json.dumps(logr.summary()))
    return 0


def cmd_diagnose(args) -> int:
    bundle, _, plant = _load_run(args.run)
    rate = ev.diagnose_infeasibility(bundle, plant, args.calls, args.alpha, seed=args.seed)
    print(json.dumps({"calls": args.calls, "fallback_rate": rate}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjfilter", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False, seed=0):
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--out", required=out_required)

    t = sub.add_parser("train", help="run the online learning loop")
    common(t, out_required=True, seed=None)
    t.add_argument("--plant", choices=PLANT_IDS)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--dt", type=float)
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 128,128")
    t.add_argument("--buffer-capacity", type=int)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="grid value iteration")
    common(o, out_required=True)
    o.add_argument("--plant", choices=PLANT_IDS, default="double_integrator")
    o.add_argument("--dt", type=float, default=0.1)
    lam = o.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lam", type=float, help="discount rate in 1/s")
    lam.add_argument("--lambda-dt", type=float, default=1e-6, help="discount rate in units of 1/dt")
    o.add_argument("--grid", required=True, help='"lo:hi:nodes,..." per state dimension')
    o.add_argument("--u-samples", type=int, default=21)
    o.add_argument("--tol", type=float, default=1e-9)
    o.add_argument("--max-iters", type=int, default=100_000)
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("eval-grid", help="dump v, b, a on a grid")
    common(e, out_required=True)
    e.add_argument("--run", required=True)
    e.add_argument("--grid", required=True)
    e.set_defaults(func=cmd_eval_grid)

    c = sub.add_parser("compare", help="compare a trained run against an oracle table")
    common(c)
    c.add_argument("--run", required=True)
    c.add_argument("--oracle", required=True)
    c.add_argument("--grid", help="resample the oracle onto this grid first")
    c.add_argument("--dead-band", type=float, default=ev.DEAD_BAND)
    c.add_argument("--min-sign", type=float, default=0.90)
    c.add_argument("--min-iou", type=float, default=0.85)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("rollout", help="closed-loop filtered rollout")
    common(r)
    r.add_argument("--run", required=True)
    r.add_argument("--x0", required=True)
    r.add_argument("--reference", type=_parse_reference, default="bang_bang:2.0", help="bang_bang:<period> | ou | constant:<u,...>")
    r.add_argument("--alpha", type=float, default=1.0)
    r.add_argument("--horizon", type=float, default=200.0)
    r.set_defaults(func=cmd_rollout)

    d = sub.add_parser("diagnose", help="QP infeasibility rate along OU rollouts")
    common(d)
    d.add_argument("--run", required=True)
    d.add_argument("--calls", type=int, default=100_000)
    d.add_argument("--alpha", type=float, default=1.0)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "out", None) and args.command in ("train",):
        os.makedirs(args.out, exist_ok=True)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
