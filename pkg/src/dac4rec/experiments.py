"""Backbone/ablation matrices, N sweeps and long-horizon bucket studies.

A matrix cell fixes a backbone and an evaluation-time selector. Cells that
share a backbone and seed share one phase-1 run; the energy cell adds phase 2
on top of it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import OfflineDataset
from .env import BehaviorSpec, EnvConfig, generate_dataset, generate_multi_logger_dataset, popular_item_logger
from .evaluation import evaluate, rows_to_csv
from .trainer import (DiffusionConfig, NetworkConfig, TrainConfig, default_config, run_backbone, train_phase1,
                      train_phase2)

log = logging.getLogger(__name__)


# -- desk-scale protocols shared by scripts/ and the acceptance tests ------------

DESK_NETWORKS = NetworkConfig((64, 64, 64), (64, 64), (64, 64, 64), (64, 64))


def desk_config(backbone: str = "dac_td3_style", **overrides) -> TrainConfig:
    """N = 20, 64-wide networks, 4k phase-1 and 2k phase-2 steps, batch 64."""
    kw = dict(diffusion=DiffusionConfig(n_steps=20), networks=DESK_NETWORKS, phase1_steps=4000,
              phase2_steps=2000, batch_size=64, log_every=0)
    kw.update(overrides)
    return default_config(backbone, **kw)


def suboptimal_dataset(env_cfg: Optional[EnvConfig] = None, n_trajectories: int = 200, seed: int = 1):
    """Oracle recommendations replaced by uniform random items 40% of the time."""
    return generate_dataset(env_cfg or EnvConfig(), BehaviorSpec(epsilon=0.4), n_trajectories, seed)


def two_logger_dataset(env_cfg: Optional[EnvConfig] = None, n_trajectories: int = 200, seed: int = 1):
    """Half the sessions from a noisy oracle (eps = 0.2), half from a logger
    that keeps pushing one popular item. The per-state action distribution is
    bimodal and its mean points between the two modes."""
    env_cfg = env_cfg or EnvConfig()
    half = n_trajectories // 2
    return generate_multi_logger_dataset(
        env_cfg, [(BehaviorSpec(epsilon=0.2), n_trajectories - half), (popular_item_logger(env_cfg), half)], seed)


def bimodal_dataset(env_cfg: Optional[EnvConfig] = None, n_trajectories: int = 100, seed: int = 0,
                    mode: float = 0.8, sigma: float = 0.1):
    env_cfg = env_cfg or EnvConfig()
    d = env_cfg.action_dim
    spec = BehaviorSpec(kind="mixture_gaussian", means=((mode,) * d, (-mode,) * d), sigma=sigma)
    return generate_dataset(env_cfg, spec, n_trajectories, seed)


# Session length depends only on the hidden fatigue (no reward-driven
# disengagement), so long sessions are not merely the lucky ones, and the
# preference keeps drifting for up to 50 steps.
LONG_HORIZON_ENV = EnvConfig(preference_drift=0.03, max_steps=50, disengage_rate=0.0)


def long_horizon_dataset(n_trajectories: int = 200, seed: int = 1):
    """A logger that serves the preference as it was 30 steps ago."""
    spec = BehaviorSpec(kind="stale_oracle", staleness_lag=30, epsilon=0.3)
    return generate_dataset(LONG_HORIZON_ENV, spec, n_trajectories, seed)


@dataclass(frozen=True)
class Cell:
    name: str
    family: str
    backbone: str
    selection: str
    k: int
    needs_energy: bool = False


CELLS = {
    "stochastic": (
        Cell("base", "stochastic", "gaussian_sac", "max_q", 1),
        Cell("+energy", "stochastic", "gaussian_sac", "soft_q", 16),
        Cell("+diffusion", "stochastic", "dac_sac_style", "max_q", 16),
        Cell("+diffusion+energy", "stochastic", "dac_sac_style", "energy_guided", 16, True),
    ),
    "deterministic": (
        Cell("base", "deterministic", "gaussian_ddpg", "max_q", 1),
        Cell("+energy", "deterministic", "gaussian_ddpg", "soft_q", 16),
        Cell("+diffusion", "deterministic", "dac_td3_style", "max_q", 16),
        Cell("+diffusion+energy", "deterministic", "dac_td3_style", "energy_guided", 16, True),
    ),
}

MATRIX_COLUMNS = ("row_type", "family", "cell", "backbone", "selection", "k", "seed", "tag",
                  "r_avg", "r_avg_std", "r_cumu", "length", "n_episodes", "status")


def cell_config(base: TrainConfig, cell: Cell, seed: int) -> TrainConfig:
    """Backbone defaults (improvement variant, selector) with the shared
    budget, network and schedule settings of ``base``."""
    shared = dict(
        diffusion=base.diffusion, networks=base.networks, optim=base.optim, critic=base.critic,
        phase1_steps=base.phase1_steps, phase2_steps=base.phase2_steps, batch_size=base.batch_size,
        log_every=base.log_every, support_bank_states=base.support_bank_states,
        entropy_coef=base.entropy_coef, candidate_noise=base.candidate_noise, seed=seed,
    )
    diffusion = cell.backbone in ("dac_td3_style", "dac_sac_style")
    cfg = default_config(cell.backbone, use_energy=diffusion and cell.needs_energy, **shared)
    return replace(cfg, improvement=replace(cfg.improvement, lam=base.improvement.lam))


def run_matrix(base: TrainConfig, dataset: OfflineDataset, env_cfg: EnvConfig, seeds: Sequence[int],
               families: Iterable[str] = ("stochastic",), n_episodes: int = 200, cells=None) -> list:
    """Train and evaluate every (cell, seed). Failures are recorded per cell
    with ``status = "failed: ..."`` and do not stop the matrix."""
    rows = []
    for family in families:
        chosen = CELLS[family] if cells is None else [c for c in CELLS[family] if c.name in cells]
        for seed in seeds:
            phase1_cache: dict = {}
            for cell in chosen:
                row = {"row_type": "run", "family": family, "cell": cell.name, "backbone": cell.backbone,
                       "selection": cell.selection, "k": cell.k, "seed": seed}
                try:
                    ckpt = _train_cell(base, cell, seed, dataset, phase1_cache)
                    rep = evaluate(ckpt, env_cfg, n_episodes, seeds=(seed,), selection=cell.selection,
                                   k=cell.k).summary()
                    row.update(tag=ckpt.metadata.get("tag", ""), r_avg=rep["r_avg_mean"],
                               r_avg_std=rep["r_avg_std"], r_cumu=rep["r_cumu_mean"],
                               length=rep["length_mean"], n_episodes=rep["n_episodes"], status="ok")
                except Exception as exc:  # isolate per-cell failures
                    log.exception("cell %s seed %s failed", cell.name, seed)
                    row.update(status=f"failed: {type(exc).__name__}: {exc}")
                rows.append(row)
    return rows + summary_rows(rows)


def _train_cell(base, cell, seed, dataset, cache):
    cfg = cell_config(base, cell, seed)
    key = (cell.backbone, seed)
    if key not in cache:
        p1 = replace(cfg, use_energy=False, guidance=replace(cfg.guidance, selection="max_q"))
        cache[key] = train_phase1(p1, dataset)
    ckpt = cache[key]
    if cell.needs_energy:
        if (key, "energy") not in cache:
            cache[(key, "energy")] = train_phase2(cfg, dataset, ckpt)
        ckpt = cache[(key, "energy")]
    return ckpt


def summary_rows(rows) -> list:
    out = []
    seen = []
    for r in rows:
        key = (r["family"], r["cell"])
        if r["row_type"] == "run" and key not in seen:
            seen.append(key)
    for family, cell in seen:
        ok = [r for r in rows if r["row_type"] == "run" and r["family"] == family and r["cell"] == cell
              and r["status"] == "ok"]
        n_all = sum(1 for r in rows if r["row_type"] == "run" and r["family"] == family and r["cell"] == cell)
        vals = np.array([r["r_avg"] for r in ok])
        first = next(r for r in rows if r["family"] == family and r["cell"] == cell)
        out.append({
            "row_type": "summary", "family": family, "cell": cell, "backbone": first["backbone"],
            "selection": first["selection"], "k": first["k"],
            "seed": ";".join(str(r["seed"]) for r in ok),
            "r_avg": float(vals.mean()) if len(vals) else float("nan"),
            "r_avg_std": float(vals.std()) if len(vals) else float("nan"),
            "status": "ok" if len(ok) == n_all else f"{n_all - len(ok)} failed",
        })
    return out


def matrix_csv(rows) -> str:
    return rows_to_csv(rows, MATRIX_COLUMNS)


def family_means(rows, family: str) -> dict:
    return {r["cell"]: r["r_avg"] for r in rows if r["row_type"] == "summary" and r["family"] == family}


def check_ordering(rows) -> dict:
    """Stochastic family: base <= +energy <= +diffusion <= +diffusion+energy.
    Deterministic family: (+diffusion - base) >= (+energy - base)."""
    result = {}
    m = family_means(rows, "stochastic")
    if len(m) == 4:
        seq = [m["base"], m["+energy"], m["+diffusion"], m["+diffusion+energy"]]
        result["stochastic"] = bool(all(a <= b for a, b in zip(seq, seq[1:])))
    m = family_means(rows, "deterministic")
    if {"base", "+energy", "+diffusion"} <= set(m):
        result["deterministic"] = bool(m["+diffusion"] - m["base"] >= m["+energy"] - m["base"])
    return result


def n_sweep(base: TrainConfig, dataset, env_cfg, n_values=(20, 50, 100, 200), seeds=(0, 1, 2, 3, 4),
            n_episodes: int = 200, selection: Optional[str] = None, k: Optional[int] = None,
            eval_seeds: Optional[Sequence[int]] = None) -> list:
    """Train one checkpoint per (N, seed) and report mean per-step reward.

    With ``eval_seeds`` every run is scored on the same evaluation episodes,
    so the spread across seeds reflects training alone.
    """
    rows = []
    for n in n_values:
        for seed in seeds:
            cfg = replace(base, diffusion=replace(base.diffusion, n_steps=n), seed=seed)
            ckpt = run_backbone(cfg, dataset)
            rep = evaluate(ckpt, env_cfg, n_episodes, seeds=tuple(eval_seeds or (seed,)), selection=selection,
                           k=k).summary()
            rows.append({"n_steps": n, "seed": seed, "r_avg": rep["r_avg_mean"], "tag": ckpt.metadata["tag"]})
    return rows


def bucket_study(checkpoints: dict, env_cfg: EnvConfig, seeds, n_episodes: int = 200, selections=None) -> dict:
    """Per-bucket Avg.CTR and the 11-20 -> 31+ relative drop for each named
    checkpoint (``checkpoints`` maps name -> list of per-seed checkpoints)."""
    out = {}
    selections = selections or {}
    for name, ckpts in checkpoints.items():
        drops, buckets = [], []
        for seed, ck in zip(seeds, ckpts):
            sel = selections.get(name, (None, None))
            s = evaluate(ck, env_cfg, n_episodes, seeds=(seed,), selection=sel[0], k=sel[1]).summary()
            drops.append(s["drop_ratio"])
            buckets.append({b: v["avg_ctr"] for b, v in s["buckets"].items()})
        out[name] = {"drops": drops, "mean_drop": float(np.nanmean(drops)), "buckets": buckets}
    return out
