"""Twin Q-networks with target copies and clipped double-Q evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward, polyak


def _sa(s, a):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if s.shape[0] != a.shape[0]:
        raise ContractError(f"batch mismatch: states {s.shape}, actions {a.shape}")
    return np.concatenate([s, a], axis=1)


def q_forward(net: MlpParams, s, a) -> np.ndarray:
    return mlp_forward(net, _sa(s, a))[:, 0]


@dataclass(frozen=True, eq=False)
class CriticPair:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    tau: float = 0.005
    gamma: float = 0.99

    def __post_init__(self):
        if not (self.q1.layer_sizes == self.q2.layer_sizes == self.q1_target.layer_sizes
                == self.q2_target.layer_sizes):
            raise ContractError("all four critic networks must share one architecture")

    def value(self, s, a, use_target: bool = False) -> np.ndarray:
        """Elementwise min of the twin critics, shape ``(batch,)``."""
        n1, n2 = (self.q1_target, self.q2_target) if use_target else (self.q1, self.q2)
        x = _sa(s, a)
        return np.minimum(mlp_forward(n1, x)[:, 0], mlp_forward(n2, x)[:, 0])

    def value_and_grad(self, s, a):
        """Online min-Q and its gradient with respect to the action.

        The gradient is taken through whichever critic attains the min for
        each row (ties go to q1).
        """
        x = _sa(s, a)
        out1, c1 = mlp_forward(self.q1, x, return_cache=True)
        out2, c2 = mlp_forward(self.q2, x, return_cache=True)
        ones = np.ones_like(out1)
        _, gx1 = mlp_backward(self.q1, x, ones, c1)
        _, gx2 = mlp_backward(self.q2, x, ones, c2)
        q1, q2 = out1[:, 0], out2[:, 0]
        use1 = (q1 <= q2)[:, None]
        d_a = x.shape[1] - np.atleast_2d(s).shape[1]
        grad = np.where(use1, gx1, gx2)[:, -d_a:]
        return np.minimum(q1, q2), grad


def init_critics(
    state_dim: int,
    action_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    activation: str = "mish",
    tau: float = 0.005,
    gamma: float = 0.99,
) -> CriticPair:
    sizes = (state_dim + action_dim, *hidden, 1)
    q1 = init_mlp(sizes, rng, activation)
    q2 = init_mlp(sizes, rng, activation)
    return CriticPair(q1, q2, q1.copy(), q2.copy(), tau, gamma)


def min_q(critics, s, a, use_target: bool = False) -> np.ndarray:
    return critics.value(s, a, use_target=use_target)


def td_targets(critics: CriticPair, batch, next_actions) -> np.ndarray:
    """y = r + gamma (1 - done) min_target_Q(s', a'); treated as a constant."""
    q_next = critics.value(batch.next_states, next_actions, use_target=True)
    not_done = 1.0 - np.asarray(batch.dones, dtype=np.float64)
    return np.asarray(batch.rewards, dtype=np.float64) + critics.gamma * not_done * q_next


def td_loss(critics: CriticPair, batch, next_actions):
    """Mean over the batch of (y - Q1)^2 + (y - Q2)^2.

    Returns ``(loss, grad_q1, grad_q2)`` with flat gradients.
    """
    n = np.asarray(batch.rewards).shape[0]
    if n == 0:
        raise ContractError("empty batch")
    y = td_targets(critics, batch, next_actions)
    x = _sa(batch.states, batch.actions)
    out1, c1 = mlp_forward(critics.q1, x, return_cache=True)
    out2, c2 = mlp_forward(critics.q2, x, return_cache=True)
    r1 = out1[:, 0] - y
    r2 = out2[:, 0] - y
    loss = float((np.sum(r1 * r1) + np.sum(r2 * r2)) / n)
    g1, _ = mlp_backward(critics.q1, x, (2.0 * r1 / n)[:, None], c1)
    g2, _ = mlp_backward(critics.q2, x, (2.0 * r2 / n)[:, None], c2)
    return loss, g1, g2


def polyak_update(critics: CriticPair) -> CriticPair:
    return replace(
        critics,
        q1_target=polyak(critics.q1, critics.q1_target, critics.tau),
        q2_target=polyak(critics.q2, critics.q2_target, critics.tau),
    )
