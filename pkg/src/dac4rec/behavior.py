"""Behavior cloning of the dataset policy with the diffusion noise model, and
one-step reconstruction of the clean action from a noisy one."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import sample_minibatch
from .diffusion import NoiseModel, Schedule, forward_noise
from .errors import ContractError
from .nn import adam_init, adam_step


@dataclass
class BcLossReport:
    loss: float
    grads: Optional[np.ndarray]
    sampled_steps: np.ndarray


def draw_noising(schedule: Schedule, actions: np.ndarray, rng: np.random.Generator):
    """Uniform step per row, standard normal noise, and the noised actions."""
    n = actions.shape[0]
    steps = rng.integers(1, schedule.n_steps + 1, size=n)
    eps = rng.standard_normal(actions.shape)
    return steps, eps, forward_noise(schedule, actions, steps, eps)


def diffusion_bc_loss(model, schedule: Schedule, batch, rng: np.random.Generator) -> BcLossReport:
    """Mean over the batch of ||eps - eps_theta(a^i, s, i)||^2.

    ``model`` is normally a :class:`NoiseModel`; any callable ``(a, s, i)``
    also works, in which case no gradients are returned.
    """
    actions = np.asarray(batch.actions, dtype=np.float64)
    if actions.shape[0] == 0:
        raise ContractError("empty batch")
    states = np.asarray(batch.states, dtype=np.float64)
    steps, eps, noisy = draw_noising(schedule, actions, rng)
    n = actions.shape[0]
    if isinstance(model, NoiseModel):
        pred, cache = model.forward(noisy, states, steps)
        resid = pred - eps
        loss = float(np.sum(resid * resid) / n)
        grads, _ = model.backward(cache, 2.0 * resid / n)
        return BcLossReport(loss, grads, steps)
    pred = np.asarray(model(noisy, states, steps), dtype=np.float64)
    resid = pred - eps
    return BcLossReport(float(np.sum(resid * resid) / n), None, steps)


def fit_behavior_clone(model: NoiseModel, schedule: Schedule, dataset, steps: int, batch_size: int,
                       lr: float, rng: np.random.Generator):
    """Plain diffusion behavior cloning (no critic): Adam on the eps-loss over
    uniform minibatches. Returns ``(model, losses)``."""
    opt = adam_init(model.net, lr)
    losses = np.empty(steps)
    for k in range(steps):
        rep = diffusion_bc_loss(model, schedule, sample_minibatch(dataset, batch_size, rng), rng)
        net, opt = adam_step(model.net, rep.grads, opt)
        model = model.with_net(net)
        losses[k] = rep.loss
    return model, losses


def approximate_a0(schedule: Schedule, model, a_i, s, i) -> np.ndarray:
    """a_hat^0 = a^i / sqrt(ab_i) - sqrt(1 - ab_i) / sqrt(ab_i) * eps_theta(a^i, s, i).

    Left unclamped on purpose: it feeds losses, not the environment.
    """
    a_i = np.asarray(a_i, dtype=np.float64)
    i = np.asarray(i)
    if np.any(i < 1) or np.any(i > schedule.n_steps):
        raise ContractError(f"step index outside 1..{schedule.n_steps}")
    ab = schedule.alpha_bar[i - 1]
    if a_i.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    pred = np.asarray(model(a_i, s, i), dtype=np.float64)
    return a_i / np.sqrt(ab) - np.sqrt(1.0 - ab) / np.sqrt(ab) * pred
