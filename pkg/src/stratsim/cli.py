"""Command-line driver.

    stratsim phase1   --config camp.yaml --out runs/a
    stratsim prelim   --config camp.yaml --out runs/a
    stratsim allocate --config camp.yaml --out runs/a
    stratsim phase2   --config camp.yaml --out runs/a
    stratsim report   --config camp.yaml --out runs/a
    stratsim oracle   [--threshold 1500]
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .allocate import InfeasibleTargetError
from .pipeline import Campaign, load_config
from .store import StageError

EQUAL_DEFAULT = 100


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stratsim", description="Double-sampling stratified reliability campaigns")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML campaign file")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker processes for limit-state evaluation")
    common.add_argument("--out", default="campaign", help="output directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p1 = sub.add_parser("phase1", parents=[common], help="build strata and bank Phase-I samples")
    p1.add_argument("--refresh-N", type=int, dest="refresh_N",
                    help="rerun subset simulation with this N at the stored thresholds")
    sub.add_parser("prelim", parents=[common], help="preliminary study with n_p samples per stratum")
    sub.add_parser("allocate", parents=[common], help="solve for the per-stratum sample sizes")
    p2 = sub.add_parser("phase2", parents=[common], help="evaluate limit states on the selected samples")
    p2.add_argument("--equal-allocation", type=int, nargs="?", const=EQUAL_DEFAULT, dest="equal_allocation",
                    metavar="N_I", help="skip prelim/allocate and use N_I samples in every stratum "
                                        f"(default {EQUAL_DEFAULT})")
    sub.add_parser("report", parents=[common], help="estimates, rates, curves and summary")
    orc = sub.add_parser("oracle", help="print benchmark reference values")
    orc.add_argument("--threshold", type=float, default=1500.0)
    return ap


def _oracle(args):
    from .benchmarks.toy import toy_oracle
    from .benchmarks.gm_model import GR_BETA, LAMBDA_M6, M_MAX, M_MIN
    print(f"toy2d P(200 sin(tau) + 3 sigma^3 > {args.threshold:g}) = {toy_oracle(args.threshold):.15g}")
    mags = np.array([6.5, 7.0, 7.5])
    span = -np.expm1(-GR_BETA * (M_MAX - M_MIN))
    rates = LAMBDA_M6 * (np.exp(-GR_BETA * (mags - M_MIN)) - np.exp(-GR_BETA * (M_MAX - M_MIN))) / span
    for mg, r in zip(mags, rates):
        print(f"gm-sdof annual rate of M > {mg}: {r:.6g}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "oracle":
        return _oracle(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "workers": args.workers,
                 "equal_allocation": getattr(args, "equal_allocation", None)}
    try:
        cfg = load_config(args.config, **overrides)
        camp = Campaign(cfg, args.out)
        if args.cmd != "report":
            print(f"seed: {cfg['seed']}")
        if args.cmd == "phase1":
            res = camp.phase1(refresh_N=args.refresh_N)
            print(f"phase1: {res.strata.mode}, {res.strata.m} strata, {res.n_hat} samples, "
                  f"counts {res.n_hat_i.tolist()}")
        elif args.cmd == "prelim":
            table = camp.prelim()
            print(f"prelim: {table.n_p} samples x {table.cond_probs.shape[0]} strata")
        elif args.cmd == "allocate":
            plan = camp.allocate()
            print(f"allocate: n = {plan.n.tolist()} (total {plan.total})")
            for h, lsid in enumerate(plan.limit_state_ids):
                state = "ok" if plan.feasible[h] else f"INFEASIBLE, floor {plan.floor[h]:.3g}; refresh Phase-I"
                print(f"  {lsid}: predicted c.o.v. {plan.kappa[h]:.3g} (target {plan.targets[h]:.3g}) {state}")
        elif args.cmd == "phase2":
            ev = camp.phase2()
            print(f"phase2: {ev.n_evaluated} limit-state evaluations, n_i = {ev.selection.n_i.tolist()}")
        elif args.cmd == "report":
            camp.report()
            print((camp.out / "report.txt").read_text(), end="")
    except (StageError, InfeasibleTargetError, ValueError, KeyError) as exc:
        print(f"error ({args.cmd}): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
