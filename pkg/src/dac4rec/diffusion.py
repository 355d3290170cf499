"""Variance-preserving noise schedule, state-conditioned noise predictor and
the forward/reverse diffusion kernels over actions.

Step indices ``i`` run from 1 to N. Arrays in :class:`Schedule` are stored
0-based, so ``schedule.beta[i - 1]`` is beta_i.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError, SamplingError
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward

EMBED_DIM = 16


@dataclass(frozen=True, eq=False)
class Schedule:
    n_steps: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_prev(self, i):
        """alpha_bar_{i-1} with the convention alpha_bar_0 = 1."""
        i = np.asarray(i)
        return np.where(i > 1, self.alpha_bar[np.maximum(i - 2, 0)], 1.0)

    def params(self) -> dict:
        return {"n_steps": self.n_steps, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(n_steps: int = 100, beta_min: float = 0.1, beta_max: float = 10.0) -> Schedule:
    """Discretized VP-SDE schedule.

    beta_i = 1 - exp(-beta_min / N - 0.5 (beta_max - beta_min) (2i - 1) / N^2)
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < beta_min <= beta_max):
        raise ConfigError(f"need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}")
    i = np.arange(1, n_steps + 1, dtype=np.float64)
    log_alpha = -beta_min / n_steps - 0.5 * (beta_max - beta_min) * (2.0 * i - 1.0) / n_steps**2
    beta = -np.expm1(log_alpha)
    if not np.all((beta > 0.0) & (beta < 1.0)):
        raise ConfigError("schedule parameters give beta outside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return Schedule(n_steps, float(beta_min), float(beta_max), beta, alpha, alpha_bar)


def timestep_embedding(i, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer step indices, shape ``(len(i), dim)``."""
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    angles = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _batchify(a, s, i):
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = a.ndim == 1
    a2 = np.atleast_2d(a)
    s2 = np.atleast_2d(s)
    if s2.shape[0] == 1 and a2.shape[0] > 1:
        s2 = np.broadcast_to(s2, (a2.shape[0], s2.shape[1]))
    if s2.shape[0] != a2.shape[0]:
        raise ContractError(f"batch mismatch: actions {a.shape}, states {s.shape}")
    i = np.broadcast_to(np.asarray(i, dtype=np.int64), (a2.shape[0],))
    return a2, s2, i, single


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """epsilon_theta(a^i, s, i): MLP over [a, s, emb(i)]."""

    net: MlpParams
    action_dim: int
    state_dim: int
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.net.n_inputs != self.action_dim + self.state_dim + self.embed_dim:
            raise ContractError("noise network input width does not match action/state/embedding dims")
        if self.net.n_outputs != self.action_dim:
            raise ContractError("noise network must output action_dim values")

    def _inputs(self, a, s, i):
        a2, s2, i, single = _batchify(a, s, i)
        if a2.shape[1] != self.action_dim or s2.shape[1] != self.state_dim:
            raise ContractError(
                f"expected action dim {self.action_dim} / state dim {self.state_dim}, "
                f"got {a2.shape[1]} / {s2.shape[1]}"
            )
        x = np.concatenate([a2, s2, timestep_embedding(i, self.embed_dim)], axis=1)
        return x, single

    def __call__(self, a, s, i) -> np.ndarray:
        x, single = self._inputs(a, s, i)
        out = mlp_forward(self.net, x)
        return out[0] if single else out

    def forward(self, a, s, i):
        """Batched prediction keeping the cache for :meth:`backward`."""
        x, _ = self._inputs(a, s, i)
        out, cache = mlp_forward(self.net, x, return_cache=True)
        return out, (x, cache)

    def backward(self, cache, upstream):
        """Returns ``(param_grad, grad_wrt_noisy_action)``."""
        x, net_cache = cache
        pgrad, xgrad = mlp_backward(self.net, x, upstream, net_cache)
        return pgrad, xgrad[:, : self.action_dim]

    def with_net(self, net: MlpParams) -> "NoiseModel":
        return NoiseModel(net, self.action_dim, self.state_dim, self.embed_dim)


def init_noise_model(
    action_dim: int,
    state_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    activation: str = "mish",
) -> NoiseModel:
    sizes = (action_dim + state_dim + EMBED_DIM, *hidden, action_dim)
    return NoiseModel(init_mlp(sizes, rng, activation), action_dim, state_dim)


def forward_noise(schedule: Schedule, a0, i, eps) -> np.ndarray:
    """Closed-form marginal q(a^i | a^0): sqrt(ab_i) a0 + sqrt(1 - ab_i) eps."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} does not match action shape {a0.shape}")
    i = np.asarray(i)
    if np.any(i < 1) or np.any(i > schedule.n_steps):
        raise ContractError(f"step index outside 1..{schedule.n_steps}")
    ab = schedule.alpha_bar[i - 1]
    if a0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def forward_step(schedule: Schedule, a_prev, i, eps) -> np.ndarray:
    """Single-step kernel q(a^i | a^{i-1}) = N(sqrt(alpha_i) a^{i-1}, beta_i I)."""
    return np.sqrt(schedule.alpha[i - 1]) * a_prev + np.sqrt(schedule.beta[i - 1]) * eps


def reverse_step(
    schedule: Schedule,
    model: Callable,
    a_i,
    s,
    i: int,
    eps,
    guidance=None,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """One ancestral step a^i -> a^{i-1}.

    a^{i-1} = a^i / sqrt(alpha_i) - beta_i / (sqrt(alpha_i) sqrt(1 - ab_i)) eps_theta
              + sqrt(beta_i) eps + guidance_scale * beta_i * guidance

    The injected noise is dropped at i = 1 regardless of ``eps``.
    """
    i = int(i)
    if not 1 <= i <= schedule.n_steps:
        raise ContractError(f"step index {i} outside 1..{schedule.n_steps}")
    a_i = np.asarray(a_i, dtype=np.float64)
    pred = np.asarray(model(a_i, s, i), dtype=np.float64)
    if not np.all(np.isfinite(pred)):
        raise SamplingError("noise model returned non-finite values", step=i)
    alpha, beta, ab = schedule.alpha[i - 1], schedule.beta[i - 1], schedule.alpha_bar[i - 1]
    out = a_i / np.sqrt(alpha) - beta / (np.sqrt(alpha) * np.sqrt(1.0 - ab)) * pred
    if i > 1:
        out = out + np.sqrt(beta) * np.asarray(eps, dtype=np.float64)
    if guidance is not None and guidance_scale != 0.0:
        out = out + guidance_scale * beta * np.asarray(guidance, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise SamplingError("reverse step produced non-finite action", step=i)
    return out


def sample_action(
    model: NoiseModel,
    schedule: Schedule,
    s,
    rng: np.random.Generator,
    guidance_fn: Optional[Callable] = None,
    guidance_scale: float = 1.0,
    action_dim: Optional[int] = None,
    clip: bool = True,
) -> np.ndarray:
    """Draw a^N ~ N(0, I) and run the reverse chain down to a^0.

    ``s`` may be one state or a batch of states; the result matches. The noise
    consumption order is fixed: a^N first, then one draw per step for
    i = N..2 (step 1 is noise-free).
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    d = action_dim if action_dim is not None else model.action_dim
    a = rng.standard_normal((s2.shape[0], d))
    use_guidance = guidance_fn is not None and guidance_scale != 0.0
    for i in range(schedule.n_steps, 0, -1):
        eps = rng.standard_normal(a.shape) if i > 1 else None
        g = guidance_fn(a, s2, i) if use_guidance else None
        a = reverse_step(schedule, model, a, s2, i, eps, g, guidance_scale)
    if clip:
        a = np.clip(a, -1.0, 1.0)
    return a[0] if single else a
