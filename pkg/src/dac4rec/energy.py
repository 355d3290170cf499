"""Intermediate energy model and evaluation-time action selection.

The energy model f_psi(s, a_t, t) regresses E_t(s, a_t) =
log E_{a_0 ~ mu(a_0 | a_t, s)}[exp Q(s, a_0)], with E_0 = Q. Its action
gradient biases each reverse step toward the reweighted policy exp(Q) * mu.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .diffusion import EMBED_DIM, NoiseModel, Schedule, sample_action, timestep_embedding
from .errors import ConfigError, ContractError
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

SELECTIONS = ("max_q", "soft_q", "energy_guided")

# Counts numerically degenerate events instead of raising mid-training.
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class GuidanceConfig:
    n_candidates: int = 16
    selection: str = "energy_guided"
    guidance_scale: float = 1.0
    m_support: int = 16

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.m_support < 2:
            raise ConfigError("m_support must be >= 2")


@dataclass(frozen=True, eq=False)
class EnergyModel:
    net: MlpParams
    action_dim: int
    state_dim: int
    trained: bool = False
    embed_dim: int = EMBED_DIM

    def _inputs(self, s, a_t, t):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        if s.shape[0] == 1 and a_t.shape[0] > 1:
            s = np.broadcast_to(s, (a_t.shape[0], s.shape[1]))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (a_t.shape[0],))
        return np.concatenate([s, a_t, timestep_embedding(t, self.embed_dim)], axis=1)

    def __call__(self, s, a_t, t) -> np.ndarray:
        return mlp_forward(self.net, self._inputs(s, a_t, t))[:, 0]

    def forward(self, s, a_t, t):
        x = self._inputs(s, a_t, t)
        out, cache = mlp_forward(self.net, x, return_cache=True)
        return out[:, 0], (x, cache)

    def backward(self, cache, upstream):
        x, net_cache = cache
        pgrad, xgrad = mlp_backward(self.net, x, np.asarray(upstream)[:, None], net_cache)
        sd = x.shape[1] - self.action_dim - self.embed_dim
        return pgrad, xgrad[:, sd:sd + self.action_dim]

    def with_net(self, net: MlpParams, trained: bool | None = None) -> "EnergyModel":
        return replace(self, net=net, trained=self.trained if trained is None else trained)


def init_energy_model(state_dim: int, action_dim: int, hidden, rng, activation: str = "mish") -> EnergyModel:
    sizes = (state_dim + action_dim + EMBED_DIM, *hidden, 1)
    return EnergyModel(init_mlp(sizes, rng, activation), action_dim, state_dim)


def energy_target(critics, schedule: Schedule, s, support_actions, a_t, t, support_q=None) -> np.ndarray:
    """Self-normalized importance estimate of log E[exp Q(s, a_0) | a_t].

    Weights w_m are proportional to N(a_t; sqrt(ab_t) a0_m, (1 - ab_t) I).
    Shapes: ``s`` (B, S) or (S,), ``support_actions`` (B, M, A) or (M, A),
    ``a_t`` (B, A) or (A,), ``t`` scalar or (B,). At t = 0 the target is
    Q(s, a_t) itself. ``support_q`` (B, M) skips re-evaluating the critics
    on the supports.
    """
    single = np.ndim(a_t) == 1
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    sup = np.asarray(support_actions, dtype=np.float64)
    if sup.ndim == 2:
        sup = sup[None]
    b, m, d = sup.shape
    if m < 2:
        raise ContractError("need at least two support actions")
    if a_t.shape != (b, d) or s.shape[0] != b:
        raise ContractError("support/state/action batch shapes disagree")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))

    if support_q is None:
        q_sup = critics.value(np.repeat(s, m, axis=0), sup.reshape(b * m, d)).reshape(b, m)
    else:
        q_sup = np.asarray(support_q, dtype=np.float64).reshape(b, m)
    out = np.empty(b)
    at_zero = t == 0
    if np.any(at_zero):
        out[at_zero] = critics.value(s[at_zero], a_t[at_zero])
    pos = ~at_zero
    if np.any(pos):
        ab = schedule.alpha_bar[t[pos] - 1][:, None]
        diff = a_t[pos][:, None, :] - np.sqrt(ab)[:, :, None] * sup[pos]
        log_dens = -0.5 * np.sum(diff * diff, axis=2) / (1.0 - ab)
        bad = ~np.all(np.isfinite(log_dens), axis=1)
        if np.any(bad):
            diagnostics["energy_target_uniform_fallback"] += int(bad.sum())
            log.warning("energy target: %d rows with degenerate weights, using uniform", int(bad.sum()))
            log_dens[bad] = 0.0
        log_w = log_dens - logsumexp(log_dens, axis=1, keepdims=True)
        out[pos] = logsumexp(log_w + q_sup[pos], axis=1)
    return out[0] if single else out


def energy_loss(energy: EnergyModel, targets, inputs):
    """Mean squared error between f_psi(s, a_t, t) and the targets.

    ``inputs`` is ``(states, noisy_actions, steps)``. Returns ``(loss, grads)``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ContractError("energy targets must be finite")
    s, a_t, t = inputs
    pred, cache = energy.forward(s, a_t, t)
    resid = pred - targets
    n = resid.shape[0]
    loss = float(np.sum(resid * resid) / n)
    grads, _ = energy.backward(cache, 2.0 * resid / n)
    return loss, grads


def guided_score(energy: EnergyModel, s, a_t, t) -> np.ndarray:
    """d f_psi(s, a_t, t) / d a_t."""
    single = np.ndim(a_t) == 1
    _, cache = energy.forward(s, a_t, t)
    _, grad = energy.backward(cache, np.ones(np.atleast_2d(a_t).shape[0]))
    return grad[0] if single else grad


def _candidates(model, schedule, s, k, rng):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    tiled = np.repeat(s, k, axis=0)
    cand = sample_action(model, schedule, tiled, rng)
    return s, tiled, cand.reshape(s.shape[0], k, -1)


def select_action_max_q(model, schedule, critics, s, k: int, rng) -> np.ndarray:
    """Sample K candidates per state, keep the one with the highest min-Q."""
    if k < 1:
        raise ContractError("K must be >= 1")
    single = np.ndim(s) == 1
    s2, tiled, cand = _candidates(model, schedule, s, k, rng)
    if k == 1:
        out = cand[:, 0]
    else:
        q = critics.value(tiled, cand.reshape(tiled.shape[0], -1)).reshape(s2.shape[0], k)
        out = cand[np.arange(s2.shape[0]), np.argmax(q, axis=1)]
    return out[0] if single else out


def softmax_pick(q: np.ndarray, rng) -> np.ndarray:
    """Row-wise index draw with probabilities softmax(q)."""
    logp = q - logsumexp(q, axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((q.shape[0], 1)) * cdf[:, -1:]
    return np.minimum(np.sum(cdf <= u, axis=1), q.shape[1] - 1)


def select_action_soft_q(model, schedule, critics, s, k: int, rng) -> np.ndarray:
    """Sample K candidates, pick one with probability proportional to exp(Q)."""
    if k < 2:
        raise ContractError("soft-Q selection needs K >= 2")
    single = np.ndim(s) == 1
    s2, tiled, cand = _candidates(model, schedule, s, k, rng)
    q = critics.value(tiled, cand.reshape(tiled.shape[0], -1)).reshape(s2.shape[0], k)
    out = cand[np.arange(s2.shape[0]), softmax_pick(q, rng)]
    return out[0] if single else out


def select_action_energy_guided(model, schedule, energy: EnergyModel, s, guidance_scale: float, rng) -> np.ndarray:
    """One reverse pass with guidance grad f_psi(s, a_t, t) added at every step."""
    if energy is None or not energy.trained:
        raise ConfigError("energy-guided selection requires a trained energy model")

    def guidance(a, states, t):
        return guided_score(energy, states, a, t)

    return sample_action(model, schedule, s, rng, guidance_fn=guidance, guidance_scale=guidance_scale)
