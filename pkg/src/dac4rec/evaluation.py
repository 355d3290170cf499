"""Policy rollouts on the simulator and report aggregation/export.

Episodes run in lockstep batches so the networks see one batched call per
MDP step, but every episode owns its env stream and its policy stream
(``StackedGenerator`` splits each batched draw row-wise across them). A
given episode therefore produces the same trajectory no matter which other
episodes share its batch.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion import NoiseModel, sample_action
from .energy import SELECTIONS, select_action_energy_guided, select_action_max_q, select_action_soft_q, softmax_pick
from .env import EnvConfig, env_reset, env_step
from .errors import ConfigError, ContractError

BUCKETS = (("1-10", 1, 10), ("11-20", 11, 20), ("21-30", 21, 30), ("31+", 31, None))
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema_version", "row_type", "checkpoint", "selection", "seed", "episode",
               "length", "r_cumu", "r_avg", "bucket")
EVAL_SALT = 7_919_000_003  # keeps evaluation streams disjoint from training streams


class StackedGenerator:
    """Looks like a ``numpy.random.Generator`` for array draws whose leading
    axis is a multiple of the number of wrapped generators; row block j is
    drawn from generator j."""

    def __init__(self, generators: Sequence[np.random.Generator]):
        if len(generators) == 0:
            raise ContractError("need at least one generator")
        self.generators = list(generators)

    def _split(self, size):
        size = (size,) if np.isscalar(size) else tuple(size)
        m = len(self.generators)
        if len(size) == 0 or size[0] % m:
            raise ContractError(f"draw of shape {size} cannot be split across {m} streams")
        return (size[0] // m, *size[1:])

    def standard_normal(self, size):
        sub = self._split(size)
        return np.concatenate([g.standard_normal(sub) for g in self.generators], axis=0)

    def random(self, size):
        sub = self._split(size)
        return np.concatenate([g.random(sub) for g in self.generators], axis=0)


def episode_streams(seed: int, episode: int):
    """(env_rng, policy_rng) for one evaluation episode."""
    return (np.random.default_rng([EVAL_SALT, seed, episode, 0]),
            np.random.default_rng([EVAL_SALT, seed, episode, 1]))


# -- selectors ------------------------------------------------------------------

def _actor_candidates(actor, s, k, rng, noise_scale):
    tiled = np.repeat(s, k, axis=0)
    if actor.deterministic:
        cand = actor.act(tiled, rng, noise_scale=noise_scale)
    else:
        cand = actor.act(tiled, rng)
    return tiled, cand.reshape(s.shape[0], k, -1)


def make_selector(ckpt, selection: Optional[str] = None, k: Optional[int] = None,
                  guidance_scale: Optional[float] = None, candidate_noise: Optional[float] = None) -> Callable:
    """Returns ``act(normalized_states, rng) -> actions`` for a checkpoint.

    Diffusion policies support all three modes. Unimodal actors support
    max_q (K = 1 means the plain actor output) and soft_q, where the
    candidates of a deterministic actor are its mean plus Gaussian noise of
    scale ``candidate_noise``.
    """
    cfg = ckpt.config
    selection = selection or cfg.guidance.selection
    k = cfg.guidance.n_candidates if k is None else k
    scale = cfg.guidance.guidance_scale if guidance_scale is None else guidance_scale
    noise = cfg.candidate_noise if candidate_noise is None else candidate_noise
    if selection not in SELECTIONS:
        raise ConfigError(f"unknown selection {selection!r}")
    policy, critics, sched = ckpt.policy, ckpt.critics, ckpt.schedule

    if isinstance(policy, NoiseModel):
        if selection == "energy_guided":
            if ckpt.energy is None or not ckpt.energy.trained:
                raise ConfigError("energy_guided selection requires a trained energy model")
            if k == 1:
                return lambda s, rng: select_action_energy_guided(policy, sched, ckpt.energy, s, scale, rng)

            def guided_best(s, rng):
                # K guided passes, then the max-Q pick (ties -> lowest index)
                tiled = np.repeat(s, k, axis=0)
                cand = select_action_energy_guided(policy, sched, ckpt.energy, tiled, scale, rng)
                q = critics.value(tiled, cand).reshape(s.shape[0], k)
                return cand.reshape(s.shape[0], k, -1)[np.arange(s.shape[0]), np.argmax(q, axis=1)]

            return guided_best
        if selection == "soft_q":
            return lambda s, rng: select_action_soft_q(policy, sched, critics, s, k, rng)
        return lambda s, rng: select_action_max_q(policy, sched, critics, s, k, rng)

    if selection == "energy_guided":
        raise ConfigError("energy_guided selection needs a diffusion policy")
    if selection == "soft_q" and k < 2:
        raise ContractError("soft-Q selection needs K >= 2")
    if selection == "max_q" and k == 1:
        return lambda s, rng: policy.act(s, rng)

    def act(s, rng):
        tiled, cand = _actor_candidates(policy, s, k, rng, noise)
        q = critics.value(tiled, cand.reshape(tiled.shape[0], -1)).reshape(s.shape[0], k)
        idx = softmax_pick(q, rng) if selection == "soft_q" else np.argmax(q, axis=1)
        return cand[np.arange(s.shape[0]), idx]

    return act


# -- rollouts -------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    seed: int
    episode: int
    rewards: list

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def r_cumu(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def r_avg(self) -> float:
        return self.r_cumu / self.length


def rollout(env_cfg: EnvConfig, act_fn: Callable, episodes: Sequence[int], seed: int,
            batch_size: int = 64) -> list:
    """Run the given episode indices to termination.

    ``act_fn(observations, env_states, rng)`` gets raw observations, the
    list of live ``EnvState`` objects and a stacked generator; it returns one
    action per live episode.
    """
    records = []
    episodes = list(episodes)
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        streams = [episode_streams(seed, e) for e in chunk]
        states = [env_reset(env_cfg, env_rng) for env_rng, _ in streams]
        rewards = [[] for _ in chunk]
        live = list(range(len(chunk)))
        while live:
            obs = np.stack([states[j].observation for j in live])
            rng = StackedGenerator([streams[j][1] for j in live])
            actions = np.asarray(act_fn(obs, [states[j] for j in live], rng))
            if actions.shape[0] != len(live):
                raise ContractError("policy returned the wrong number of actions")
            still = []
            for row, j in enumerate(live):
                nxt, r, done = env_step(env_cfg, states[j], actions[row], streams[j][0])
                states[j] = nxt
                rewards[j].append(r)
                if not done:
                    still.append(j)
            live = still
        records.extend(EpisodeRecord(seed, e, rw) for e, rw in zip(chunk, rewards))
    return records


def checkpoint_policy(ckpt, **selector_kwargs) -> Callable:
    select = make_selector(ckpt, **selector_kwargs)

    def act(obs, env_states, rng):
        return select(ckpt.normalize(obs), rng)

    return act


def oracle_policy(obs, env_states, rng):
    return np.stack([st.latent_preference for st in env_states])


# -- reports --------------------------------------------------------------------

def bucket_of(length: int) -> str:
    for name, lo, hi in BUCKETS:
        if length >= lo and (hi is None or length <= hi):
            return name
    raise ContractError(f"episode length {length} is not positive")


@dataclass
class EvalReport:
    episodes: list
    selection: str
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # order-independent aggregation
        self.episodes = sorted(self.episodes, key=lambda e: (e.seed, e.episode))

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def seeds(self) -> list:
        return sorted({e.seed for e in self.episodes})

    def _col(self, name):
        return np.array([getattr(e, name) for e in self.episodes], dtype=np.float64)

    def summary(self) -> dict:
        r_cumu, r_avg, length = self._col("r_cumu"), self._col("r_avg"), self._col("length")
        buckets = {}
        for name, _, _ in BUCKETS:
            vals = [e.r_avg for e in self.episodes if bucket_of(e.length) == name]
            buckets[name] = {"count": len(vals), "avg_ctr": float(np.mean(vals)) if vals else float("nan")}
        return {
            "checkpoint": self.checkpoint,
            "selection": self.selection,
            "n_episodes": self.n_episodes,
            "seeds": self.seeds,
            "r_cumu_mean": float(r_cumu.mean()), "r_cumu_std": float(r_cumu.std()),
            "r_avg_mean": float(r_avg.mean()), "r_avg_std": float(r_avg.std()),
            "length_mean": float(length.mean()),
            "buckets": buckets,
            "drop_ratio": drop_ratio(buckets),
            **self.extra,
        }

    def rows(self) -> list:
        out = []
        for e in self.episodes:
            out.append({"schema_version": CSV_SCHEMA_VERSION, "row_type": "episode",
                        "checkpoint": self.checkpoint, "selection": self.selection, "seed": e.seed,
                        "episode": e.episode, "length": e.length, "r_cumu": e.r_cumu, "r_avg": e.r_avg,
                        "bucket": bucket_of(e.length)})
        s = self.summary()
        out.append({"schema_version": CSV_SCHEMA_VERSION, "row_type": "summary",
                    "checkpoint": self.checkpoint, "selection": self.selection,
                    "seed": ";".join(map(str, s["seeds"])), "episode": "", "length": s["length_mean"],
                    "r_cumu": s["r_cumu_mean"], "r_avg": s["r_avg_mean"], "bucket": ""})
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), CSV_COLUMNS)

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "rows": self.rows()}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        s = self.summary()
        lines = [
            f"checkpoint  {s['checkpoint']}",
            f"selection   {s['selection']}",
            f"episodes    {s['n_episodes']}  seeds {s['seeds']}",
            f"r_cumu      {s['r_cumu_mean']!r} +- {s['r_cumu_std']!r}",
            f"r_avg       {s['r_avg_mean']!r} +- {s['r_avg_std']!r}",
            f"length      {s['length_mean']!r}",
            "bucket      count  avg_ctr",
        ]
        for name, b in s["buckets"].items():
            tag = "  (extension)" if name == "1-10" else ""
            lines.append(f"{name:<11} {b['count']:<6} {b['avg_ctr']!r}{tag}")
        lines.append(f"drop 11-20 -> 31+  {s['drop_ratio']!r}")
        return "\n".join(lines)


def drop_ratio(buckets: dict) -> float:
    """(avg_ctr[11-20] - avg_ctr[31+]) / avg_ctr[11-20]."""
    a, b = buckets["11-20"]["avg_ctr"], buckets["31+"]["avg_ctr"]
    if not np.isfinite(a) or not np.isfinite(b) or a == 0:
        return float("nan")
    return float((a - b) / a)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def evaluate(ckpt, env_cfg: EnvConfig, n_episodes: int = 200, seeds=(0,), selection=None, k=None,
             guidance_scale=None, batch_size: int = 64, checkpoint_name: str = "") -> EvalReport:
    act = checkpoint_policy(ckpt, selection=selection, k=k, guidance_scale=guidance_scale)
    records = []
    for seed in seeds:
        records.extend(rollout(env_cfg, act, range(n_episodes), seed, batch_size))
    sel = selection or ckpt.config.guidance.selection
    return EvalReport(records, sel, checkpoint_name or ckpt.metadata.get("tag", ""),
                      {"n_candidates": ckpt.config.guidance.n_candidates if k is None else k})
