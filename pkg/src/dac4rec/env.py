"""Synthetic recommendation MDP.

A user holds a hidden unit-norm preference over the item-embedding space.
Recommending item embedding ``a`` yields a click probability
``(1 + cos(a, preference)) / 2`` (minus an optional boredom penalty, plus
noise, clipped to [0, 1]). The preference drifts linearly in time toward a
hidden per-episode trend, so behavior that keeps serving the initial taste
decays over long sessions. Each step the user also browses on their own,
producing a noisy "organic" item signal; the agent only sees summaries of
that signal and of its own recommendation history. Users have a hidden
fatigue rate; engagement falls by that rate each step and faster after bad
recommendations, and the session ends when engagement drops below a floor.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError

BEHAVIOR_KINDS = ("mixture_gaussian", "epsilon_greedy_oracle", "stale_oracle")

counters: Counter = Counter()


@dataclass(frozen=True)
class EnvConfig:
    state_dim: int = 16
    action_dim: int = 4
    max_steps: int = 40
    preference_drift: float = 0.02
    reward_noise_sigma: float = 0.05
    boredom_strength: float = 0.0
    seed: int = 0
    organic_noise: float = 0.5
    history_decay: float = 0.3
    fatigue_min: float = 0.015
    fatigue_max: float = 0.08
    disengage_rate: float = 0.05
    disengage_threshold: float = 0.05

    def __post_init__(self):
        if self.action_dim < 1 or self.state_dim < 1 or self.max_steps < 1:
            raise ConfigError("state_dim, action_dim and max_steps must be positive")
        for name in ("preference_drift", "reward_noise_sigma", "boredom_strength",
                     "organic_noise", "disengage_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.history_decay <= 1:
            raise ConfigError("history_decay must lie in (0, 1]")
        if not 0 <= self.fatigue_min <= self.fatigue_max:
            raise ConfigError("need 0 <= fatigue_min <= fatigue_max")

    @property
    def feature_dim(self) -> int:
        return 3 * self.action_dim + 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BehaviorSpec:
    kind: str = "epsilon_greedy_oracle"
    means: tuple = ()
    sigma: float = 0.05
    epsilon: float = 0.0
    staleness_lag: int = 0

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ConfigError(f"unknown behavior kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.kind == "mixture_gaussian" and len(self.means) == 0:
            raise ConfigError("mixture_gaussian behavior needs at least one mean")
        object.__setattr__(self, "means", tuple(tuple(float(v) for v in np.atleast_1d(m)) for m in self.means))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["means"] = [list(m) for m in self.means]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorSpec":
        d = dict(d)
        d["means"] = tuple(tuple(m) for m in d.get("means", ()))
        return cls(**d)


@dataclass(frozen=True, eq=False)
class EnvState:
    latent_preference: np.ndarray
    initial_preference: np.ndarray
    trend: np.ndarray
    fatigue: float
    step_index: int
    engagement: float
    ema_organic: np.ndarray
    last_organic: np.ndarray
    last_action: np.ndarray
    last_reward: float
    ema_reward: float
    observation: np.ndarray


_PROJECTION_SEED = 20240917


def _projection(cfg: EnvConfig):
    if cfg.state_dim == cfg.feature_dim:
        return None
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.standard_normal((cfg.state_dim, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else v


def preference_at(state: EnvState, t: int, drift: float) -> np.ndarray:
    w = min(1.0, drift * max(t, 0))
    p = (1.0 - w) * state.initial_preference + w * state.trend
    n = np.linalg.norm(p)
    return p / n if n > 1e-12 else state.trend.copy()


def _observe(cfg, ema_organic, last_organic, last_action, last_reward, ema_reward, engagement, step):
    feats = np.concatenate([
        ema_organic, last_organic, last_action,
        [last_reward, ema_reward, engagement, step / cfg.max_steps],
    ])
    proj = _projection(cfg)
    return feats if proj is None else proj @ feats


def env_reset(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    d = cfg.action_dim
    p0 = _unit(rng.standard_normal(d))
    trend = _unit(rng.standard_normal(d))
    fatigue = float(rng.uniform(cfg.fatigue_min, cfg.fatigue_max))
    organic = p0 + cfg.organic_noise * rng.standard_normal(d)
    zeros = np.zeros(d)
    obs = _observe(cfg, organic, organic, zeros, 0.5, 0.5, 1.0, 0)
    return EnvState(p0, p0.copy(), trend, fatigue, 0, 1.0, organic, organic.copy(), zeros,
                    0.5, 0.5, obs)


def cosine(a, p) -> float:
    na = np.linalg.norm(a)
    if na < 1e-12:
        return 0.0
    return float(np.dot(a, p) / (na * np.linalg.norm(p)))


def env_step(cfg: EnvConfig, state: EnvState, action, rng: np.random.Generator):
    """Returns ``(next_state, reward, done)``."""
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (cfg.action_dim,):
        raise ContractError(f"action must have {cfg.action_dim} coordinates")
    if not np.all(np.isfinite(a)):
        raise ContractError("non-finite action")
    if np.any(np.abs(a) > 1.0):
        counters["action_clamped"] += 1
        a = np.clip(a, -1.0, 1.0)

    base = 0.5 * (1.0 + cosine(a, state.latent_preference))
    boredom = 0.0
    if cfg.boredom_strength > 0 and state.step_index > 0:
        boredom = cfg.boredom_strength * max(0.0, cosine(a, state.last_action))
    noise = rng.normal(0.0, cfg.reward_noise_sigma) if cfg.reward_noise_sigma > 0 else 0.0
    reward = float(np.clip(base - boredom + noise, 0.0, 1.0))

    t = state.step_index + 1
    p_next = preference_at(state, t, cfg.preference_drift)
    organic = p_next + cfg.organic_noise * rng.standard_normal(cfg.action_dim)
    rho = cfg.history_decay
    ema_organic = (1.0 - rho) * state.ema_organic + rho * organic
    ema_reward = (1.0 - rho) * state.ema_reward + rho * reward
    engagement = float(np.clip(
        state.engagement - state.fatigue - cfg.disengage_rate * (1.0 - reward), 0.0, 1.0))
    done = t >= cfg.max_steps or engagement < cfg.disengage_threshold
    obs = _observe(cfg, ema_organic, organic, a, reward, ema_reward, engagement, t)
    nxt = replace(
        state, latent_preference=p_next, step_index=t, engagement=engagement,
        ema_organic=ema_organic, last_organic=organic, last_action=a,
        last_reward=reward, ema_reward=ema_reward, observation=obs,
    )
    return nxt, reward, bool(done)


def oracle_action(cfg: EnvConfig, state: EnvState) -> np.ndarray:
    return state.latent_preference.copy()


def behavior_action(cfg: EnvConfig, spec: BehaviorSpec, state: EnvState, rng) -> np.ndarray:
    d = cfg.action_dim
    if spec.kind == "mixture_gaussian":
        k = int(rng.integers(len(spec.means)))
        mean = np.asarray(spec.means[k], dtype=np.float64)
        if mean.shape != (d,):
            mean = np.broadcast_to(mean, (d,))
        return np.clip(mean + spec.sigma * rng.standard_normal(d), -1.0, 1.0)
    if spec.epsilon > 0 and rng.random() < spec.epsilon:
        return rng.uniform(-1.0, 1.0, size=d)
    if spec.kind == "stale_oracle":
        return preference_at(state, state.step_index - spec.staleness_lag, cfg.preference_drift)
    return oracle_action(cfg, state)


def generate_dataset(cfg: EnvConfig, behavior: BehaviorSpec, n_trajectories: int, rng=None):
    """Roll out the behavior policy and collect every transition.

    ``rng`` defaults to a generator seeded from ``cfg.seed``; the seed is
    recorded in the dataset metadata either way.
    """
    from .data import OfflineDataset

    if n_trajectories < 1:
        raise ContractError("n_trajectories must be >= 1")
    seed = cfg.seed if rng is None or isinstance(rng, (int, np.integer)) else None
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    elif isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    states, actions, rewards, next_states, dones, traj = [], [], [], [], [], []
    for k in range(n_trajectories):
        st = env_reset(cfg, rng)
        done = False
        while not done:
            a = behavior_action(cfg, behavior, st, rng)
            nxt, r, done = env_step(cfg, st, a, rng)
            states.append(st.observation)
            actions.append(np.clip(a, -1.0, 1.0))
            rewards.append(r)
            next_states.append(nxt.observation)
            dones.append(done)
            traj.append(k)
            st = nxt
    metadata = {
        "env_config": cfg.to_dict(),
        "behavior": behavior.to_dict(),
        "seed": seed,
        "n_trajectories": n_trajectories,
    }
    return OfflineDataset.from_arrays(
        np.array(states), np.array(actions), np.array(rewards),
        np.array(next_states), np.array(dones), np.array(traj, dtype=np.int64), metadata,
    )


def generate_multi_logger_dataset(cfg: EnvConfig, parts, seed: int = 0):
    """Pool trajectories logged by several behavior policies.

    ``parts`` is a sequence of ``(BehaviorSpec, n_trajectories)``; part j is
    rolled out from seed ``[seed, j]``. Per state the pooled action
    distribution is then a mixture of the loggers' policies.
    """
    from .data import concat_datasets

    if not parts:
        raise ContractError("need at least one (behavior, n_trajectories) part")
    sets = [generate_dataset(cfg, spec, n, np.random.default_rng([seed, j])) for j, (spec, n) in enumerate(parts)]
    metadata = {
        "env_config": cfg.to_dict(),
        "behavior": {"kind": "multi_logger", "parts": [[spec.to_dict(), n] for spec, n in parts]},
        "seed": seed,
        "n_trajectories": sum(n for _, n in parts),
    }
    return concat_datasets(sets, metadata)


def popular_item_logger(cfg: EnvConfig, item=None, sigma: float = 0.1) -> BehaviorSpec:
    """A state-independent logger that keeps recommending one item."""
    if item is None:
        item = np.resize([0.6, -0.6], cfg.action_dim)
    return BehaviorSpec(kind="mixture_gaussian", means=(tuple(item),), sigma=sigma)
