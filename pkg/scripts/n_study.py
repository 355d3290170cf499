"""Mean and run-to-run spread of Avg.CTR as the number of diffusion steps N varies.

    python scripts/n_study.py --n 20 50 100 200 --seeds 0 1 2 3 4
"""
import argparse
import csv
import logging
import sys
from collections import defaultdict

import numpy as np

from dac4rec import experiments as ex
from dac4rec.env import EnvConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, nargs="+", default=[20, 50, 100, 200])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--k", type=int, default=1, help="max-Q candidates at evaluation")
    ap.add_argument("--eval-seed", type=int, default=99, help="shared evaluation seed for every run")
    ap.add_argument("--phase1-steps", type=int, default=4000)
    ap.add_argument("--out", default=None, help="optional CSV of per-run rows")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ex.desk_config(use_energy=False, phase1_steps=args.phase1_steps)
    rows = ex.n_sweep(base, ex.suboptimal_dataset(), EnvConfig(), args.n, args.seeds, args.episodes,
                      selection="max_q", k=args.k, eval_seeds=(args.eval_seed,))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    by_n = defaultdict(list)
    for r in rows:
        by_n[r["n_steps"]].append(r["r_avg"])
    w = csv.writer(sys.stdout)
    w.writerow(["n_steps", "mean", "std"])
    for n, v in sorted(by_n.items()):
        w.writerow([n, f"{np.mean(v):.4f}", f"{np.std(v, ddof=1) if len(v) > 1 else 0.0:.4f}"])


if __name__ == "__main__":
    main()
