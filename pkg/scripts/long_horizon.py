"""Avg.CTR by session-length bucket for the diffusion policy and a Gaussian BC baseline."""
import argparse
import json
import logging
from dataclasses import replace

from dac4rec import experiments as ex
from dac4rec.improvement import ImprovementConfig
from dac4rec.trainer import train_phase1


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--phase1-steps", type=int, default=4000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = ex.long_horizon_dataset()
    dac_cfg = ex.desk_config("dac_td3_style", use_energy=False, phase1_steps=args.phase1_steps)
    gbc_cfg = ex.desk_config("gaussian_sac", improvement=ImprovementConfig(variant="direct", lam=0.0),
                             phase1_steps=args.phase1_steps)
    ckpts = {"dac": [train_phase1(replace(dac_cfg, seed=s), ds) for s in args.seeds],
             "gaussian_bc": [train_phase1(replace(gbc_cfg, seed=s), ds) for s in args.seeds]}
    out = ex.bucket_study(ckpts, ex.LONG_HORIZON_ENV, args.seeds, args.episodes,
                          {"dac": ("max_q", 16), "gaussian_bc": ("max_q", 1)})
    for name, res in out.items():
        print(f"{name}: mean relative drop 11-20 -> 31+ {res['mean_drop']:+.4f}")
    print(json.dumps(out, indent=1, default=float))


if __name__ == "__main__":
    main()
