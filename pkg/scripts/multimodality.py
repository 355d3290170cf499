"""Diffusion BC vs Gaussian BC on a dataset whose actions sit at +-0.8."""
import argparse

import numpy as np

from dac4rec import experiments as ex
from dac4rec.behavior import fit_behavior_clone
from dac4rec.diffusion import init_noise_model, make_schedule, sample_action
from dac4rec.gaussian import fit_actor_clone, init_actor


def near(x, centre, tol=0.2):
    return float(np.mean(np.max(np.abs(x - centre), axis=1) < tol))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--n-steps", type=int, default=20)
    args = ap.parse_args()

    print("seed  dac@-0.8  dac@+0.8  dac@0  gauss_mean@0")
    for seed in args.seeds:
        ds = ex.bimodal_dataset(seed=seed)
        rng = np.random.default_rng(seed)
        sched = make_schedule(args.n_steps)
        model = init_noise_model(ds.action_dim, ds.state_dim, (64, 64, 64), rng)
        model, _ = fit_behavior_clone(model, sched, ds, args.steps, args.batch, args.lr, rng)
        s = ds.normalize(ds.states[rng.choice(len(ds), 1000)])
        a = sample_action(model, sched, s, rng)
        actor = init_actor(ds.state_dim, ds.action_dim, (64, 64), rng, deterministic=False)
        actor, _ = fit_actor_clone(actor, ds, args.steps, args.batch, args.lr, rng)
        mean, _, _ = actor.forward(s)
        print(f"{seed:4d}  {near(a, -0.8):8.3f}  {near(a, 0.8):8.3f}  {near(a, 0.0):5.3f}  {near(mean, 0.0):12.3f}")


if __name__ == "__main__":
    main()
