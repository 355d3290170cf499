"""Two-phase training loop.

Phase 1 co-trains the twin critics (TD error against targets that use
actions sampled from the target policy) and the policy (behavior cloning
plus lambda times a Q-improvement term), with Polyak-averaged targets.
Phase 2 freezes both and fits the intermediate energy model used for guided
sampling. Baseline backbones swap the diffusion policy for a unimodal actor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Optional

import numpy as np

from .behavior import diffusion_bc_loss
from .critic import CriticPair, init_critics, polyak_update, td_loss
from .data import OfflineDataset, sample_minibatch
from .diffusion import NoiseModel, Schedule, forward_noise, init_noise_model, make_schedule, sample_action
from .energy import EnergyModel, GuidanceConfig, energy_loss, energy_target, init_energy_model
from .errors import ConfigError, ContractError, NonFiniteError
from .gaussian import GaussianActor, actor_update, init_actor
from .improvement import ImprovementConfig, combined_policy_update
from .nn import MlpParams, OptState, adam_init, adam_update, clip_grad_norm, polyak

log = logging.getLogger(__name__)

BACKBONES = ("dac_td3_style", "dac_sac_style", "gaussian_ddpg", "gaussian_sac")
DIFFUSION_BACKBONES = ("dac_td3_style", "dac_sac_style")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DiffusionConfig:
    n_steps: int = 100
    beta_min: float = 0.1
    beta_max: float = 10.0


@dataclass(frozen=True)
class NetworkConfig:
    noise_hidden: tuple = (256, 256, 256)
    critic_hidden: tuple = (256, 256)
    energy_hidden: tuple = (256, 256, 256)
    actor_hidden: tuple = (256, 256)
    activation: str = "mish"


@dataclass(frozen=True)
class OptimConfig:
    policy_lr: float = 3e-4
    critic_lr: float = 3e-4
    energy_lr: float = 3e-4
    grad_clip: Optional[float] = None


@dataclass(frozen=True)
class CriticConfig:
    gamma: float = 0.99
    tau: float = 0.005


@dataclass(frozen=True)
class TrainConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    improvement: ImprovementConfig = field(default_factory=ImprovementConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    backbone: str = "dac_td3_style"
    phase1_steps: int = 100_000
    phase2_steps: int = 20_000
    batch_size: int = 256
    log_every: int = 1000
    eval_every: int = 0
    eval_episodes: int = 20
    seed: int = 0
    use_energy: bool = True
    action_approximation: bool = True
    support_bank_states: int = 2048
    entropy_coef: float = 0.01
    candidate_noise: float = 0.1

    def __post_init__(self):
        check_config(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    @property
    def uses_diffusion(self) -> bool:
        return self.backbone in DIFFUSION_BACKBONES

    @property
    def tag(self) -> str:
        parts = [self.backbone, self.improvement.variant if self.uses_diffusion else "gauss",
                 f"lam{self.improvement.lam:g}", f"N{self.diffusion.n_steps}",
                 f"{self.guidance.selection}{self.guidance.n_candidates}"]
        if not self.use_energy:
            parts.append("noE")
        if not self.action_approximation:
            parts.append("noA")
        return "-".join(parts)


def _from_dict(cls, d):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        sub = f.default_factory if f.default_factory is not field().default_factory else None
        if sub is not None and is_dataclass(sub) and isinstance(v, dict):
            v = _from_dict(sub, v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kwargs)


def check_config(cfg: TrainConfig) -> None:
    """Raise ConfigError listing every conflicting flag combination."""
    problems = []
    if cfg.backbone not in BACKBONES:
        problems.append(f"unknown backbone {cfg.backbone!r}")
    for name in ("phase1_steps", "phase2_steps"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name} must be >= 0")
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if not 0 < cfg.critic.tau <= 1:
        problems.append("critic.tau must lie in (0, 1]")
    if not 0 <= cfg.critic.gamma <= 1:
        problems.append("critic.gamma must lie in [0, 1]")
    diffusion = cfg.backbone in DIFFUSION_BACKBONES
    if not cfg.action_approximation:
        if not diffusion:
            problems.append("action_approximation=False only applies to diffusion backbones")
        elif cfg.improvement.variant != "elbo_weighted":
            problems.append(
                f"action_approximation=False conflicts with variant {cfg.improvement.variant!r} "
                "(only elbo_weighted avoids the one-step reconstruction)")
    if not diffusion and cfg.guidance.selection == "energy_guided":
        problems.append(f"selection 'energy_guided' needs a diffusion backbone, got {cfg.backbone!r}")
    if not diffusion and cfg.use_energy:
        problems.append(f"use_energy (phase 2 energy model) needs a diffusion backbone, got {cfg.backbone!r}")
    if diffusion and not cfg.use_energy and cfg.guidance.selection == "energy_guided":
        problems.append("selection 'energy_guided' conflicts with use_energy=False")
    if cfg.support_bank_states < 1:
        problems.append("support_bank_states must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))


def default_config(backbone: str = "dac_td3_style", **overrides) -> TrainConfig:
    """Backbone-appropriate defaults: direct Q-gradient improvement and max-Q
    selection for the TD3-style diffusion policy, AWR-weighted reconstruction
    and energy guidance for the SAC-style one."""
    improvement = overrides.pop("improvement", None)
    guidance = overrides.pop("guidance", None)
    if backbone == "dac_td3_style":
        improvement = improvement or ImprovementConfig(variant="direct")
        guidance = guidance or GuidanceConfig(selection="max_q", n_candidates=16)
    elif backbone == "dac_sac_style":
        improvement = improvement or ImprovementConfig(variant="awr_approx")
        if overrides.get("use_energy", True):
            guidance = guidance or GuidanceConfig(selection="energy_guided")
        else:
            guidance = guidance or GuidanceConfig(selection="max_q", n_candidates=16)
    else:
        improvement = improvement or ImprovementConfig(variant="direct")
        guidance = guidance or GuidanceConfig(selection="max_q", n_candidates=1)
        overrides.setdefault("use_energy", False)
    return TrainConfig(backbone=backbone, improvement=improvement, guidance=guidance, **overrides)


# -- checkpoint -----------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    schedule: Schedule
    policy: object
    policy_target: object
    critics: CriticPair
    energy: Optional[EnergyModel]
    state_mean: np.ndarray
    state_std: np.ndarray
    opt_states: dict
    rng_state: dict
    counters: dict = field(default_factory=lambda: {"phase1": 0, "phase2": 0})
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def normalize(self, states):
        return (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def _policy_kind(policy) -> str:
    if isinstance(policy, NoiseModel):
        return "noise_model"
    if isinstance(policy, GaussianActor):
        return "deterministic_actor" if policy.deterministic else "gaussian_actor"
    raise ContractError(f"unknown policy type {type(policy).__name__}")


def _policy_from(kind: str, net: MlpParams, action_dim: int, state_dim: int):
    if kind == "noise_model":
        return NoiseModel(net, action_dim, state_dim)
    return GaussianActor(net, action_dim, state_dim, kind == "deterministic_actor")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    nets = {
        "policy": ckpt.policy.net,
        "policy_target": ckpt.policy_target.net,
        "q1": ckpt.critics.q1, "q2": ckpt.critics.q2,
        "q1_target": ckpt.critics.q1_target, "q2_target": ckpt.critics.q2_target,
    }
    if ckpt.energy is not None:
        nets["energy"] = ckpt.energy.net
    arrays = {f"net/{k}": v.flat for k, v in nets.items()}
    arrays["state_mean"] = ckpt.state_mean
    arrays["state_std"] = ckpt.state_std
    opt_meta = {}
    for name, st in ckpt.opt_states.items():
        arrays[f"opt/{name}/m"] = st.first_moment
        arrays[f"opt/{name}/v"] = st.second_moment
        opt_meta[name] = {"step_count": st.step_count, "learning_rate": st.learning_rate,
                          "beta1": st.beta1, "beta2": st.beta2, "epsilon": st.epsilon}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule.params(),
        "policy_kind": _policy_kind(ckpt.policy),
        "action_dim": ckpt.policy.action_dim,
        "state_dim": ckpt.policy.state_dim,
        "networks": {k: {"layer_sizes": list(v.layer_sizes), "activation": v.activation,
                         "output_activation": v.output_activation} for k, v in nets.items()},
        "energy_trained": bool(ckpt.energy.trained) if ckpt.energy is not None else None,
        "opt": opt_meta,
        "rng_state": ckpt.rng_state,
        "counters": ckpt.counters,
        "history": ckpt.history,
        "metadata": ckpt.metadata,
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('format_version')}")
        nets = {
            k: MlpParams(tuple(spec["layer_sizes"]), np.array(z[f"net/{k}"]), spec["activation"],
                         spec["output_activation"])
            for k, spec in header["networks"].items()
        }
        opt_states = {
            name: OptState(np.array(z[f"opt/{name}/m"]), np.array(z[f"opt/{name}/v"]), **meta)
            for name, meta in header["opt"].items()
        }
        state_mean, state_std = np.array(z["state_mean"]), np.array(z["state_std"])
    cfg = TrainConfig.from_dict(header["config"])
    kind, ad, sd = header["policy_kind"], header["action_dim"], header["state_dim"]
    sched = make_schedule(**header["schedule"])
    critics = CriticPair(nets["q1"], nets["q2"], nets["q1_target"], nets["q2_target"],
                         cfg.critic.tau, cfg.critic.gamma)
    energy = None
    if "energy" in nets:
        energy = EnergyModel(nets["energy"], ad, sd, trained=bool(header["energy_trained"]))
    return Checkpoint(
        config=cfg, schedule=sched,
        policy=_policy_from(kind, nets["policy"], ad, sd),
        policy_target=_policy_from(kind, nets["policy_target"], ad, sd),
        critics=critics, energy=energy, state_mean=state_mean, state_std=state_std,
        opt_states=opt_states, rng_state=header["rng_state"], counters=header["counters"],
        history=header["history"], metadata=header["metadata"],
    )


# -- phase 1 --------------------------------------------------------------------

class TrainingError(RuntimeError):
    """Training aborted; ``last_good`` holds the state before the failing step."""

    def __init__(self, message, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


def init_checkpoint(cfg: TrainConfig, dataset: OfflineDataset) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    sd, ad = dataset.state_dim, dataset.action_dim
    net = cfg.networks
    sched = make_schedule(cfg.diffusion.n_steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    if cfg.uses_diffusion:
        policy = init_noise_model(ad, sd, tuple(net.noise_hidden), rng, net.activation)
    else:
        policy = init_actor(sd, ad, tuple(net.actor_hidden), rng,
                            deterministic=cfg.backbone == "gaussian_ddpg", activation=net.activation)
    critics = init_critics(sd, ad, tuple(net.critic_hidden), rng, net.activation,
                           cfg.critic.tau, cfg.critic.gamma)
    opt = {
        "policy": adam_init(policy.net, cfg.optim.policy_lr),
        "q1": adam_init(critics.q1, cfg.optim.critic_lr),
        "q2": adam_init(critics.q2, cfg.optim.critic_lr),
    }
    metadata = {
        "tag": cfg.tag,
        "backbone": cfg.backbone,
        "variant": cfg.improvement.variant if cfg.uses_diffusion else None,
        "lambda": cfg.improvement.lam,
        "bc_only": cfg.improvement.lam == 0,
        "dataset": dataset.metadata,
    }
    return Checkpoint(cfg, sched, policy, policy.with_net(policy.net.copy()), critics, None,
                      dataset.state_mean.copy(), dataset.state_std.copy(), opt,
                      rng.bit_generator.state, {"phase1": 0, "phase2": 0}, [], metadata)


def _next_actions(ckpt: Checkpoint, states, rng):
    target = ckpt.policy_target
    if isinstance(target, NoiseModel):
        return sample_action(target, ckpt.schedule, states, rng)
    return target.act(states, rng)


def phase1_step(ckpt: Checkpoint, batch, rng) -> tuple[Checkpoint, dict]:
    """One iteration: critic step, policy step, target updates."""
    cfg = ckpt.config
    next_a = _next_actions(ckpt, batch.next_states, rng)
    l_td, g1, g2 = td_loss(ckpt.critics, batch, next_a)
    if not np.isfinite(l_td):
        raise NonFiniteError("TD loss is not finite", step=ckpt.counters["phase1"])
    q1_flat, o1 = adam_update(ckpt.critics.q1.flat, clip_grad_norm(g1, cfg.optim.grad_clip), ckpt.opt_states["q1"])
    q2_flat, o2 = adam_update(ckpt.critics.q2.flat, clip_grad_norm(g2, cfg.optim.grad_clip), ckpt.opt_states["q2"])
    critics = replace(ckpt.critics, q1=ckpt.critics.q1.with_flat(q1_flat), q2=ckpt.critics.q2.with_flat(q2_flat))

    if isinstance(ckpt.policy, NoiseModel):
        policy, opt_p, rep = combined_policy_update(
            ckpt.policy, critics, ckpt.schedule, batch, rng, cfg.improvement,
            ckpt.opt_states["policy"], cfg.optim.grad_clip)
    else:
        policy, opt_p, rep = actor_update(
            ckpt.policy, critics, batch, rng, cfg.improvement.lam, ckpt.opt_states["policy"],
            cfg.improvement.q_normalize, cfg.entropy_coef if not ckpt.policy.deterministic else 0.0,
            cfg.optim.grad_clip)
    policy_target = ckpt.policy_target.with_net(polyak(policy.net, ckpt.policy_target.net, cfg.critic.tau))
    critics = polyak_update(critics)
    counters = dict(ckpt.counters, phase1=ckpt.counters["phase1"] + 1)
    new = replace(ckpt, policy=policy, policy_target=policy_target, critics=critics,
                  opt_states=dict(ckpt.opt_states, policy=opt_p, q1=o1, q2=o2), counters=counters)
    rep = dict(rep, L_td=l_td)
    return new, rep


def train_phase1(cfg: TrainConfig, dataset: OfflineDataset, checkpoint: Optional[Checkpoint] = None,
                 metrics_path=None, eval_fn=None) -> Checkpoint:
    """Run phase 1 up to ``cfg.phase1_steps`` total iterations.

    Passing a checkpoint resumes from its counters and stored RNG state.
    ``eval_fn(checkpoint) -> dict`` is called every ``cfg.eval_every`` steps.
    """
    if len(dataset) == 0:
        raise ContractError("phase 1 needs a non-empty dataset")
    ckpt = checkpoint if checkpoint is not None else init_checkpoint(cfg, dataset)
    if checkpoint is not None:
        ckpt = replace(ckpt, config=cfg)
    rng = ckpt.rng()
    history = list(ckpt.history)
    running: dict = {}
    step = ckpt.counters["phase1"]
    while step < cfg.phase1_steps:
        batch = sample_minibatch(dataset, cfg.batch_size, rng)
        try:
            nxt, rep = phase1_step(ckpt, batch, rng)
        except NonFiniteError as exc:
            raise TrainingError(f"phase 1 aborted at step {step}: {exc}",
                                replace(ckpt, history=history, rng_state=rng.bit_generator.state)) from exc
        ckpt = nxt
        step += 1
        for k, v in rep.items():
            running[k] = running.get(k, 0.0) + v
        running["_n"] = running.get("_n", 0) + 1
        if cfg.log_every and step % cfg.log_every == 0:
            n = running.pop("_n")
            entry = {"phase": 1, "step": step, **{k: v / n for k, v in running.items()}}
            running = {}
            if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
                entry.update(eval_fn(replace(ckpt, rng_state=rng.bit_generator.state)))
            history.append(entry)
            _append_metrics(metrics_path, entry)
            log.debug("phase1 %s", entry)
    return replace(ckpt, history=history, rng_state=rng.bit_generator.state)


def _append_metrics(path, entry):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# -- phase 2 --------------------------------------------------------------------

@dataclass(eq=False)
class SupportBank:
    states: np.ndarray     # (nb, S) normalized
    actions: np.ndarray    # (nb, A) dataset actions
    supports: np.ndarray   # (nb, M, A); column 0 is the dataset action
    support_q: np.ndarray  # (nb, M)


def build_support_bank(ckpt: Checkpoint, dataset: OfflineDataset, rng) -> SupportBank:
    """Pre-sample M - 1 actions per state from the frozen behavior policy.

    The dataset action is kept as the first support so the importance
    estimate is anchored at the data point as t -> 0.
    """
    cfg = ckpt.config
    m = cfg.guidance.m_support
    nb = min(cfg.support_bank_states, len(dataset))
    idx = np.sort(rng.choice(len(dataset), size=nb, replace=False))
    states = ckpt.normalize(dataset.states[idx])
    actions = dataset.actions[idx]
    drawn = sample_action(ckpt.policy, ckpt.schedule, np.repeat(states, m - 1, axis=0), rng)
    supports = np.concatenate([actions[:, None, :], drawn.reshape(nb, m - 1, -1)], axis=1)
    q = ckpt.critics.value(np.repeat(states, m, axis=0), supports.reshape(nb * m, -1)).reshape(nb, m)
    return SupportBank(states, actions, supports, q)


def phase2_batch(ckpt: Checkpoint, bank: SupportBank, batch_size: int, rng):
    """Sample (s, a_0, t), noise a_0 to a_t and compute the energy targets.

    Returns ``((states, noisy_actions, steps), targets, clean_actions)``.
    """
    n_steps = ckpt.schedule.n_steps
    j = rng.integers(0, bank.states.shape[0], size=batch_size)
    s, a0 = bank.states[j], bank.actions[j]
    t = rng.integers(0, n_steps + 1, size=batch_size)
    eps = rng.standard_normal(a0.shape)
    a_t = a0.copy()
    pos = t > 0
    if np.any(pos):
        a_t[pos] = forward_noise(ckpt.schedule, a0[pos], t[pos], eps[pos])
    targets = energy_target(ckpt.critics, ckpt.schedule, s, bank.supports[j], a_t, t,
                            support_q=bank.support_q[j])
    return (s, a_t, t), targets, a0


def train_phase2(cfg: TrainConfig, dataset: OfflineDataset, checkpoint: Checkpoint, metrics_path=None) -> Checkpoint:
    """Fit f_psi with theta and phi frozen. ``phase2_steps = 0`` attaches an
    untrained energy model."""
    if checkpoint is None or checkpoint.critics is None or checkpoint.policy is None:
        raise ConfigError("phase 2 needs a phase-1 checkpoint (critics and policy)")
    if not isinstance(checkpoint.policy, NoiseModel):
        raise ConfigError(f"phase 2 needs a diffusion policy, checkpoint has {_policy_kind(checkpoint.policy)}")
    ckpt = replace(checkpoint, config=cfg)
    rng = ckpt.rng()
    energy = ckpt.energy
    opt_states = dict(ckpt.opt_states)
    if energy is None:
        energy = init_energy_model(ckpt.policy.state_dim, ckpt.policy.action_dim,
                                   tuple(cfg.networks.energy_hidden), rng, cfg.networks.activation)
        opt_states["energy"] = adam_init(energy.net, cfg.optim.energy_lr)
    history = list(ckpt.history)
    step = ckpt.counters.get("phase2", 0)
    if step >= cfg.phase2_steps:
        return replace(ckpt, energy=energy, opt_states=opt_states, rng_state=rng.bit_generator.state)
    bank = build_support_bank(ckpt, dataset, rng)
    running, n_run = 0.0, 0
    while step < cfg.phase2_steps:
        inputs, targets, _ = phase2_batch(ckpt, bank, cfg.batch_size, rng)
        loss, grads = energy_loss(energy, targets, inputs)
        flat, opt_states["energy"] = adam_update(energy.net.flat, clip_grad_norm(grads, cfg.optim.grad_clip),
                                                 opt_states["energy"])
        energy = energy.with_net(energy.net.with_flat(flat), trained=True)
        step += 1
        running += loss
        n_run += 1
        if cfg.log_every and step % cfg.log_every == 0:
            entry = {"phase": 2, "step": step, "L_energy": running / n_run}
            running, n_run = 0.0, 0
            history.append(entry)
            _append_metrics(metrics_path, entry)
    counters = dict(ckpt.counters, phase2=step)
    return replace(ckpt, energy=energy, opt_states=opt_states, counters=counters, history=history,
                   rng_state=rng.bit_generator.state)


def run_backbone(cfg: TrainConfig, dataset: OfflineDataset, metrics_path=None, eval_fn=None) -> Checkpoint:
    """Phase 1 for every backbone; phase 2 only for diffusion backbones with
    ``use_energy``. Skipping phase 2 is the no-energy ablation."""
    check_config(cfg)
    ckpt = train_phase1(cfg, dataset, metrics_path=metrics_path, eval_fn=eval_fn)
    if cfg.uses_diffusion and cfg.use_energy:
        ckpt = train_phase2(cfg, dataset, ckpt, metrics_path=metrics_path)
    ckpt.metadata["phases"] = ["phase1", "phase2"] if ckpt.energy is not None else ["phase1"]
    return ckpt
