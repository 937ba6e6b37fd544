#!/usr/bin/env python3
"""Mean top-1 of local training and CKIF as the contamination fraction grows.

Writes a CSV (fraction, seed, mode, mean_top1) suitable for plotting.
"""

import argparse
import csv
import sys

import numpy as np

from fedretro.experiment import build_clients, heterogeneity_fixture, prepare_dataset, run_mode


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--modes", nargs="+", default=["local", "ckif"])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    args = ap.parse_args()

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["fraction", "seed", "mode", "mean_top1"])
    for seed in args.seeds:
        for frac in args.fractions:
            exp = heterogeneity_fixture(seed, frac)
            _, used = prepare_dataset(exp)
            clients = build_clients(exp, used)
            for mode in args.modes:
                res = run_mode(exp, clients, mode, args.threads).evaluate(clients, exp, args.threads, ks=(1,))
                w.writerow([frac, seed, mode, repr(float(np.mean([r.topk[1] for r in res])))])
                fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
