"""Backbone/ablation matrix on the two-logger dataset.

    python scripts/run_matrix.py --seeds 0 1 2 3 4 --episodes 200 --out matrix.csv
"""
import argparse
import logging

from dac4rec import experiments as ex
from dac4rec.env import EnvConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--families", nargs="+", default=["stochastic", "deterministic"])
    ap.add_argument("--dataset", choices=["two_logger", "suboptimal"], default="two_logger")
    ap.add_argument("--phase1-steps", type=int, default=4000)
    ap.add_argument("--phase2-steps", type=int, default=2000)
    ap.add_argument("--out", default="matrix.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = ex.two_logger_dataset() if args.dataset == "two_logger" else ex.suboptimal_dataset()
    base = ex.desk_config(phase1_steps=args.phase1_steps, phase2_steps=args.phase2_steps)
    rows = ex.run_matrix(base, ds, EnvConfig(), args.seeds, args.families, args.episodes)
    with open(args.out, "w") as fh:
        fh.write(ex.matrix_csv(rows))
    for fam in args.families:
        means = ex.family_means(rows, fam)
        print(fam, "  ".join(f"{c} {v:.4f}" for c, v in means.items()))
    print("ordering holds:", ex.check_ordering(rows))


if __name__ == "__main__":
    main()
