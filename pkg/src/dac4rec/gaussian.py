"""Unimodal baseline actors sharing the twin critics: a deterministic
tanh actor (DDPG/TD3 style) and a state-conditioned diagonal Gaussian
(SAC style). Both are trained offline with a behavior-cloning term plus
lambda times a Q term, mirroring the diffusion policy objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import sample_minibatch
from .errors import ContractError, NonFiniteError
from .nn import MlpParams, OptState, adam_init, adam_update, clip_grad_norm, init_mlp, mlp_backward, mlp_forward

LOG_STD_MIN, LOG_STD_MAX = -5.0, 0.5


@dataclass(frozen=True, eq=False)
class GaussianActor:
    net: MlpParams
    action_dim: int
    state_dim: int
    deterministic: bool

    def with_net(self, net: MlpParams) -> "GaussianActor":
        return GaussianActor(net, self.action_dim, self.state_dim, self.deterministic)

    def forward(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        out, cache = mlp_forward(self.net, s, return_cache=True)
        d = self.action_dim
        mean = np.tanh(out[:, :d])
        if self.deterministic:
            return mean, None, (s, cache, mean, None)
        th = np.tanh(out[:, d:])
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (th + 1.0)
        return mean, log_std, (s, cache, mean, th)

    def backward(self, cache, d_mean, d_log_std=None):
        s, net_cache, mean, th = cache
        up = [d_mean * (1.0 - mean * mean)]
        if not self.deterministic:
            if d_log_std is None:
                d_log_std = np.zeros_like(mean)
            up.append(d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - th * th))
        grads, _ = mlp_backward(self.net, s, np.concatenate(up, axis=1), net_cache)
        return grads

    def act(self, s, rng=None, noise_scale: float | None = None):
        """Sample (stochastic actor) or return the mean (deterministic actor).

        ``noise_scale`` adds N(0, noise_scale^2) exploration to a deterministic
        actor, used to build candidate sets for Q-based selection.
        """
        single = np.ndim(s) == 1
        mean, log_std, _ = self.forward(s)
        if self.deterministic:
            a = mean if not noise_scale else mean + noise_scale * rng.standard_normal(mean.shape)
        else:
            a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        a = np.clip(a, -1.0, 1.0)
        return a[0] if single else a


def init_actor(state_dim: int, action_dim: int, hidden, rng, deterministic: bool, activation: str = "mish"):
    out = action_dim if deterministic else 2 * action_dim
    return GaussianActor(init_mlp((state_dim, *hidden, out), rng, activation), action_dim, state_dim, deterministic)


def actor_bc_loss(actor: GaussianActor, batch):
    """Squared error to dataset actions (deterministic) or Gaussian NLL."""
    a = np.asarray(batch.actions, dtype=np.float64)
    n = a.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    mean, log_std, cache = actor.forward(batch.states)
    diff = mean - a
    if actor.deterministic:
        loss = float(np.sum(diff * diff) / n)
        return loss, actor.backward(cache, 2.0 * diff / n)
    inv_var = np.exp(-2.0 * log_std)
    z2 = diff * diff * inv_var
    loss = float(np.sum(0.5 * z2 + log_std + 0.5 * np.log(2 * np.pi)) / n)
    return loss, actor.backward(cache, diff * inv_var / n, (1.0 - z2) / n)


def actor_q_loss(actor: GaussianActor, critics, batch, rng, q_normalize: bool = True, entropy_coef: float = 0.0):
    """-Q(s, pi(s)) / mean|Q| for pi sampled by reparameterization, minus
    ``entropy_coef`` times the Gaussian entropy for the stochastic actor."""
    s = np.asarray(batch.states, dtype=np.float64)
    n = s.shape[0]
    mean, log_std, cache = actor.forward(s)
    if actor.deterministic:
        a = mean
    else:
        xi = rng.standard_normal(mean.shape)
        std = np.exp(log_std)
        a = mean + std * xi
    q, dq_da = critics.value_and_grad(s, a)
    scale = max(float(np.mean(np.abs(q))), 1e-8) if q_normalize else 1.0
    loss = -float(np.mean(q)) / scale
    d_a = -dq_da / (n * scale)
    if actor.deterministic:
        return loss, actor.backward(cache, d_a)
    loss -= entropy_coef * float(np.sum(log_std) / n)
    d_log_std = d_a * std * xi - entropy_coef / n
    return loss, actor.backward(cache, d_a, d_log_std)


def actor_update(actor, critics, batch, rng, lam: float, opt: OptState, q_normalize=True,
                 entropy_coef=0.0, grad_clip=None):
    l_bc, grads = actor_bc_loss(actor, batch)
    l_q = 0.0
    if lam > 0:
        l_q, q_grads = actor_q_loss(actor, critics, batch, rng, q_normalize, entropy_coef)
        grads = grads + lam * q_grads
    total = l_bc + lam * l_q
    if not np.isfinite(total):
        raise NonFiniteError("actor loss is not finite", L_bc=l_bc, L_q=l_q, step=opt.step_count)
    new_flat, opt = adam_update(actor.net.flat, clip_grad_norm(grads, grad_clip), opt)
    return actor.with_net(actor.net.with_flat(new_flat)), opt, {"L_d": l_bc, "L_q": l_q, "L": total}


def fit_actor_clone(actor: GaussianActor, dataset, steps: int, batch_size: int, lr: float, rng):
    """Behavior cloning only (MSE or Gaussian NLL). Returns ``(actor, losses)``."""
    opt = adam_init(actor.net, lr)
    losses = np.empty(steps)
    for k in range(steps):
        losses[k], grads = actor_bc_loss(actor, sample_minibatch(dataset, batch_size, rng))
        flat, opt = adam_update(actor.net.flat, grads, opt)
        actor = actor.with_net(actor.net.with_flat(flat))
    return actor, losses
