"""Command-line front end.

    dac4rec [--config run.yaml] [--seed S] [--out PATH] generate|train|evaluate|matrix ...

Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime. Errors are
reported on stderr as one JSON object ``{"error": kind, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .data import read_dataset, write_dataset
from .env import (BehaviorSpec, EnvConfig, generate_dataset, generate_multi_logger_dataset,
                  popular_item_logger)
from .errors import ConfigError, Dac4RecError
from .evaluation import evaluate
from .experiments import CELLS, check_ordering, matrix_csv, run_matrix
from .improvement import ImprovementConfig
from .trainer import (DiffusionConfig, TrainConfig, TrainingError, default_config, load_checkpoint,
                      save_checkpoint, train_phase1, train_phase2)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
BEHAVIOR_ALIASES = {"mixture": "mixture_gaussian", "epsilon_greedy": "epsilon_greedy_oracle",
                    "stale": "stale_oracle"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dac4rec", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="YAML run config (sections: env, behavior, train, eval)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output path (file for generate/train, directory for evaluate/matrix)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="roll out a behavior policy into a dataset file")
    g.add_argument("--behavior", default="epsilon_greedy",
                   choices=sorted(BEHAVIOR_ALIASES) + sorted(BEHAVIOR_ALIASES.values()))
    g.add_argument("--trajectories", type=int, default=500)
    g.add_argument("--epsilon", type=float, default=None)
    g.add_argument("--means", type=float, nargs="+", default=None,
                   help="mixture means (each broadcast over all action coordinates)")
    g.add_argument("--sigma", type=float, default=None)
    g.add_argument("--lag", type=int, default=None)
    g.add_argument("--popular-fraction", type=float, default=0.0,
                   help="share of trajectories logged by a fixed popular-item recommender")
    g.add_argument("--drift", type=float, default=None)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--action-dim", type=int, default=None)
    g.add_argument("--state-dim", type=int, default=None)

    t = sub.add_parser("train", help="run phase 1, phase 2 or both")
    t.add_argument("--data", required=True)
    t.add_argument("--phase", choices=("1", "2", "both"), default="both")
    t.add_argument("--backbone", choices=("dac_td3_style", "dac_sac_style", "gaussian_ddpg", "gaussian_sac"))
    t.add_argument("--variant", choices=("direct", "elbo_weighted", "awr_approx"))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--n-steps", type=int)
    t.add_argument("--phase1-steps", type=int)
    t.add_argument("--phase2-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-energy", action="store_true", help="skip phase 2 (energy ablation)")
    t.add_argument("--no-action-approximation", action="store_true")
    t.add_argument("--checkpoint", help="phase-1 checkpoint for --phase 2, or one to resume")
    t.add_argument("--metrics", help="append JSON metric lines here")

    e = sub.add_parser("evaluate", help="roll out a checkpoint and write text/CSV/JSON reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--eval-seeds", type=int, nargs="+")
    e.add_argument("--selection", choices=("max_q", "soft_q", "energy_guided"))
    e.add_argument("--k", type=int)
    e.add_argument("--guidance-scale", type=float)
    e.add_argument("--drift", type=float, default=None)

    m = sub.add_parser("matrix", help="backbone x component matrix")
    m.add_argument("--data", required=True)
    m.add_argument("--families", nargs="+", default=["stochastic"], choices=sorted(CELLS))
    m.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    m.add_argument("--episodes", type=int)
    m.add_argument("--cells", nargs="+", default=None)
    m.add_argument("--phase1-steps", type=int)
    m.add_argument("--phase2-steps", type=int)
    m.add_argument("--n-steps", type=int)
    return p


def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a mapping")
    unknown = set(cfg) - {"env", "behavior", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _env_config(run: dict, **overrides) -> EnvConfig:
    d = dict(run.get("env", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return EnvConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad env section: {exc}") from exc


def _train_config(run: dict, args, seed) -> TrainConfig:
    d = dict(run.get("train", {}))
    backbone = getattr(args, "backbone", None) or d.pop("backbone", "dac_td3_style")
    d.pop("backbone", None)
    base = default_config(backbone, use_energy=d.get("use_energy", backbone in ("dac_td3_style", "dac_sac_style")))
    merged = base.to_dict()
    for key, val in d.items():
        if isinstance(val, dict) and isinstance(merged.get(key), dict):
            merged[key].update(val)
        else:
            merged[key] = val
    imp = merged["improvement"]
    if getattr(args, "variant", None):
        imp["variant"] = args.variant
    if getattr(args, "lam", None) is not None:
        imp["lam"] = args.lam
    if getattr(args, "n_steps", None):
        merged["diffusion"]["n_steps"] = args.n_steps
    for flag in ("phase1_steps", "phase2_steps", "batch_size"):
        if getattr(args, flag, None) is not None:
            merged[flag] = getattr(args, flag)
    if getattr(args, "no_energy", False):
        merged["use_energy"] = False
        if merged["guidance"]["selection"] == "energy_guided":
            merged["guidance"]["selection"] = "max_q"
    if getattr(args, "no_action_approximation", False):
        merged["action_approximation"] = False
        imp["variant"] = "elbo_weighted"
    if seed is not None:
        merged["seed"] = seed
    return TrainConfig.from_dict(merged)


def cmd_generate(args, run) -> int:
    if not args.out:
        raise UsageError("generate: --out is required")
    env = _env_config(run, preference_drift=args.drift, max_steps=args.max_steps,
                      action_dim=args.action_dim, state_dim=args.state_dim,
                      seed=args.seed if args.seed is not None else None)
    b = dict(run.get("behavior", {}))
    b["kind"] = BEHAVIOR_ALIASES.get(args.behavior, args.behavior)
    if args.epsilon is not None:
        b["epsilon"] = args.epsilon
    if args.sigma is not None:
        b["sigma"] = args.sigma
    if args.lag is not None:
        b["staleness_lag"] = args.lag
    if args.means is not None:
        b["means"] = tuple((m,) * env.action_dim for m in args.means)
    elif b["kind"] == "mixture_gaussian" and "means" not in b:
        b["means"] = ((0.8,) * env.action_dim, (-0.8,) * env.action_dim)
    behavior = BehaviorSpec.from_dict(b)
    if not 0.0 <= args.popular_fraction < 1.0:
        raise UsageError("generate: --popular-fraction must lie in [0, 1)")
    n_pop = int(round(args.popular_fraction * args.trajectories))
    if n_pop:
        ds = generate_multi_logger_dataset(
            env, [(behavior, args.trajectories - n_pop), (popular_item_logger(env), n_pop)], env.seed)
    else:
        ds = generate_dataset(env, behavior, args.trajectories, env.seed)
    ds.metadata["cli"] = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}
    write_dataset(ds, args.out)
    summary = ds.summary()
    acts = ds.actions.reshape(-1)
    summary["action_modes"] = {
        "frac_near_+0.8": float(np.mean(np.abs(acts - 0.8) < 0.2)),
        "frac_near_-0.8": float(np.mean(np.abs(acts + 0.8) < 0.2)),
        "frac_near_0": float(np.mean(np.abs(acts) < 0.2)),
    }
    print(json.dumps({"dataset": args.out, **summary}, sort_keys=True))
    return EXIT_OK


def cmd_train(args, run) -> int:
    if not args.out:
        raise UsageError("train: --out is required")
    cfg = _train_config(run, args, args.seed)  # config errors surface here, before any compute
    if args.phase == "2" and not args.checkpoint:
        raise ConfigError("--phase 2 needs --checkpoint from a phase-1 run")
    if args.phase in ("2", "both") and not cfg.uses_diffusion:
        if args.phase == "2":
            raise ConfigError(f"phase 2 needs a diffusion backbone, got {cfg.backbone}")
    dataset = read_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    try:
        if args.phase in ("1", "both"):
            ckpt = train_phase1(cfg, dataset, ckpt, metrics_path=args.metrics)
        if args.phase == "2" or (args.phase == "both" and cfg.uses_diffusion and cfg.use_energy):
            ckpt = train_phase2(cfg, dataset, ckpt, metrics_path=args.metrics)
    except TrainingError as exc:
        save_checkpoint(exc.last_good, args.out + ".last_good.npz")
        raise
    ckpt.metadata["dataset_path"] = os.path.abspath(args.data)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"checkpoint": args.out, "tag": ckpt.metadata["tag"], "counters": ckpt.counters,
                      "energy_trained": bool(ckpt.energy is not None and ckpt.energy.trained),
                      "bc_only": ckpt.metadata["bc_only"]}, sort_keys=True))
    return EXIT_OK


def _eval_env(ckpt, run, drift):
    d = dict(ckpt.metadata.get("dataset", {}).get("env_config", {}))
    d.update(run.get("env", {}))
    if drift is not None:
        d["preference_drift"] = drift
    return EnvConfig(**d)


def cmd_evaluate(args, run) -> int:
    ev = run.get("eval", {})
    ckpt = load_checkpoint(args.checkpoint)
    env = _eval_env(ckpt, run, args.drift)
    seeds = args.eval_seeds or ev.get("seeds") or ([args.seed] if args.seed is not None else [0, 1, 2, 3, 4])
    episodes = args.episodes or ev.get("episodes", 200)
    report = evaluate(ckpt, env, episodes, seeds=seeds, selection=args.selection or ev.get("selection"),
                      k=args.k or ev.get("k"), guidance_scale=args.guidance_scale,
                      checkpoint_name=os.path.basename(args.checkpoint))
    text = report.to_text()
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, body in (("report.txt", text + "\n"), ("report.csv", report.to_csv()),
                           ("report.json", report.to_json())):
            with open(os.path.join(args.out, name), "w") as fh:
                fh.write(body)
    return EXIT_OK


def cmd_matrix(args, run) -> int:
    if not args.out:
        raise UsageError("matrix: --out is required")
    base = _train_config(run, args, None)
    if args.n_steps:
        base = replace(base, diffusion=replace(base.diffusion, n_steps=args.n_steps))
    dataset = read_dataset(args.data)
    env = EnvConfig(**{**dataset.metadata.get("env_config", {}), **run.get("env", {})})
    episodes = args.episodes or run.get("eval", {}).get("episodes", 200)
    rows = run_matrix(base, dataset, env, args.seeds, args.families, episodes, args.cells)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "matrix.csv"), "w") as fh:
        fh.write(matrix_csv(rows))
    print(matrix_csv([r for r in rows if r["row_type"] == "summary"]), end="")
    print(json.dumps({"ordering": check_ordering(rows)}))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "matrix": cmd_matrix}


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        run = load_run_config(args.config)
        return COMMANDS[args.command](args, run)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (Dac4RecError, OSError, FloatingPointError, RuntimeError, ValueError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
