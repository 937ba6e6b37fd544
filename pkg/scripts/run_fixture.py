#!/usr/bin/env python3
"""Run the heterogeneity fixture for several seeds and print per-client top-1.

    python3 scripts/run_fixture.py --seeds 0 1 2 --out fixture.json
    python3 scripts/run_fixture.py --contamination 0.2 --modes local ckif
"""

import argparse
import json
import logging
import time

import numpy as np

from fedretro.experiment import build_clients, heterogeneity_fixture, prepare_dataset, run_mode


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--modes", nargs="+", default=["local", "fedavg", "ckif"])
    ap.add_argument("--contamination", type=float, default=0.0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", help="write results as JSON")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    results = []
    for seed in args.seeds:
        exp = heterogeneity_fixture(seed, args.contamination)
        _, used = prepare_dataset(exp)
        clients = build_clients(exp, used)
        for mode in args.modes:
            t0 = time.perf_counter()
            res = run_mode(exp, clients, mode, args.threads).evaluate(clients, exp, args.threads, ks=(1, 10))
            top1 = [r.topk[1] for r in res]
            results.append({"seed": seed, "mode": mode, "top1": top1, "top10": [r.topk[10] for r in res],
                            "seconds": round(time.perf_counter() - t0, 1)})
            print(f"seed {seed} {mode:7s} top-1 " + " ".join(f"{x:.3f}" for x in top1)
                  + f"  mean {np.mean(top1):.3f}  ({results[-1]['seconds']:.0f} s)", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"contamination": args.contamination, "runs": results}, fh, indent=1)


if __name__ == "__main__":
    main()
