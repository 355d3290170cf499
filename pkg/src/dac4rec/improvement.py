"""Q-guided improvement terms for the diffusion policy and the combined
objective L = L_d + lambda * L_q."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .behavior import diffusion_bc_loss, draw_noising
from .diffusion import NoiseModel, Schedule
from .errors import ConfigError, ContractError, NonFiniteError
from .nn import OptState, adam_update, clip_grad_norm

log = logging.getLogger(__name__)

VARIANTS = ("direct", "elbo_weighted", "awr_approx")
BASELINES = ("batch_mean", "policy")


@dataclass(frozen=True)
class ImprovementConfig:
    variant: str = "awr_approx"
    lam: float = 1.0
    awr_temperature: float = 1.0
    awr_weight_clip: float = 100.0
    q_normalize: bool = True
    awr_baseline: str = "batch_mean"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown improvement variant {self.variant!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.awr_temperature <= 0:
            raise ConfigError("AWR temperature must be positive")
        if self.awr_weight_clip < 1:
            raise ConfigError("AWR weight clip must be >= 1")
        if self.awr_baseline not in BASELINES:
            raise ConfigError(f"unknown AWR baseline {self.awr_baseline!r}")


def awr_weight(q_value, baseline, cfg: ImprovementConfig):
    """g = min(exp((q - baseline) / T), clip); vectorized, overflow-safe."""
    z = (np.asarray(q_value, dtype=np.float64) - baseline) / cfg.awr_temperature
    return np.exp(np.minimum(z, np.log(cfg.awr_weight_clip)))


_logged_first_step_convention = False


def elbo_coefficients(schedule: Schedule, steps) -> np.ndarray:
    """beta_i / (2 alpha_i (1 - ab_{i-1})); at i = 1 the limit beta_1 / (2 alpha_1)."""
    global _logged_first_step_convention
    steps = np.asarray(steps)
    beta = schedule.beta[steps - 1]
    alpha = schedule.alpha[steps - 1]
    one_minus_prev = np.where(steps > 1, 1.0 - schedule.alpha_bar_prev(steps), 1.0)
    if not _logged_first_step_convention and np.any(steps == 1):
        log.info("ELBO weight at i=1: using beta_1 / (2 alpha_1) since 1 - alpha_bar_0 = 0")
        _logged_first_step_convention = True
    return beta / (2.0 * alpha * one_minus_prev)


def _check_batch(batch):
    actions = np.asarray(batch.actions, dtype=np.float64)
    if actions.shape[0] == 0:
        raise ContractError("empty batch")
    return np.asarray(batch.states, dtype=np.float64), actions


def _predict(model, noisy, states, steps):
    # plain callables are accepted for testing; they yield no gradients
    if isinstance(model, NoiseModel):
        return model.forward(noisy, states, steps)
    return np.asarray(model(noisy, states, steps), dtype=np.float64), None


def _grads(model, cache, upstream):
    if cache is None:
        return None
    grads, _ = model.backward(cache, upstream)
    return grads


def _reconstruct(model, schedule: Schedule, states, actions, rng):
    steps, eps, noisy = draw_noising(schedule, actions, rng)
    pred, cache = _predict(model, noisy, states, steps)
    ab = schedule.alpha_bar[steps - 1][:, None]
    ratio = np.sqrt(1.0 - ab) / np.sqrt(ab)
    a0_hat = noisy / np.sqrt(ab) - ratio * pred
    return a0_hat, ratio, cache, steps, eps


def _dataset_weights(critics, states, actions, cfg: ImprovementConfig, a0_hat=None):
    q_data = critics.value(states, actions)
    if cfg.awr_baseline == "policy" and a0_hat is not None:
        baseline = critics.value(states, np.clip(a0_hat, -1.0, 1.0))
    else:
        baseline = float(np.mean(q_data))
    return awr_weight(q_data, baseline, cfg)


def q_loss_direct(critics, model: NoiseModel, schedule: Schedule, batch, rng, cfg: ImprovementConfig):
    """-mean min_Q(s, a_hat^0), gradients through a_hat^0 into theta only."""
    states, actions = _check_batch(batch)
    n = actions.shape[0]
    a0_hat, ratio, cache, _, _ = _reconstruct(model, schedule, states, actions, rng)
    q, dq_da = critics.value_and_grad(states, a0_hat)
    scale = max(float(np.mean(np.abs(q))), 1e-8) if cfg.q_normalize else 1.0
    loss = -float(np.mean(q)) / scale
    d_a0 = -dq_da / (n * scale)
    return loss, _grads(model, cache, -ratio * d_a0)


def q_loss_elbo_weighted(critics, model: NoiseModel, schedule: Schedule, batch, rng, cfg: ImprovementConfig):
    """Mean of elbo_coef(i) * g(Q(s, a)) * ||eps - eps_theta(a^i, s, i)||^2."""
    states, actions = _check_batch(batch)
    n = actions.shape[0]
    steps, eps, noisy = draw_noising(schedule, actions, rng)
    pred, cache = _predict(model, noisy, states, steps)
    weights = elbo_coefficients(schedule, steps) * _dataset_weights(critics, states, actions, cfg)
    resid = pred - eps
    loss = float(np.sum(weights * np.sum(resid * resid, axis=1)) / n)
    return loss, _grads(model, cache, 2.0 * weights[:, None] * resid / n)


def q_loss_awr_approx(critics, model: NoiseModel, schedule: Schedule, batch, rng, cfg: ImprovementConfig):
    """Mean of g(Q(s, a)) * ||a - a_hat^0||^2 with a_hat^0 from one-step denoising."""
    states, actions = _check_batch(batch)
    n = actions.shape[0]
    a0_hat, ratio, cache, _, _ = _reconstruct(model, schedule, states, actions, rng)
    weights = _dataset_weights(critics, states, actions, cfg, a0_hat)
    diff = a0_hat - actions
    loss = float(np.sum(weights * np.sum(diff * diff, axis=1)) / n)
    d_a0 = 2.0 * weights[:, None] * diff / n
    return loss, _grads(model, cache, -ratio * d_a0)


Q_LOSSES = {
    "direct": q_loss_direct,
    "elbo_weighted": q_loss_elbo_weighted,
    "awr_approx": q_loss_awr_approx,
}


def combined_policy_update(
    model: NoiseModel,
    critics,
    schedule: Schedule,
    batch,
    rng: np.random.Generator,
    cfg: ImprovementConfig,
    opt: OptState,
    grad_clip: float | None = None,
):
    """One Adam step on L_d + lambda * L_q.

    With lambda = 0 the improvement term is skipped entirely (no random draws),
    so the update is bit-identical to plain behavior cloning.
    Returns ``(model, opt, report)``.
    """
    bc = diffusion_bc_loss(model, schedule, batch, rng)
    grads = bc.grads
    l_q = 0.0
    if cfg.lam > 0:
        l_q, q_grads = Q_LOSSES[cfg.variant](critics, model, schedule, batch, rng, cfg)
        grads = grads + cfg.lam * q_grads
    total = bc.loss + cfg.lam * l_q
    if not np.isfinite(total):
        raise NonFiniteError("policy loss is not finite", L_d=bc.loss, L_q=l_q, step=opt.step_count)
    grads = clip_grad_norm(grads, grad_clip)
    new_flat, opt = adam_update(model.net.flat, grads, opt)
    report = {"L_d": bc.loss, "L_q": l_q, "L": total}
    return model.with_net(model.net.with_flat(new_flat)), opt, report
