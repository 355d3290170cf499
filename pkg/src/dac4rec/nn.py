"""Plain feed-forward networks with hand-written backprop, plus Adam.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it. That keeps optimizers, target-network averaging and
serialization trivial: they all operate on ``params.flat``.

Weight matrices have shape ``(next_size, prev_size)``. Inputs may be a single
vector or a ``(batch, features)`` matrix; gradients are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

FORMAT_VERSION = 1
ACTIVATIONS = ("mish", "relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


def _mish(x):
    # tanh(softplus(x)) written through the logistic s = sigmoid(x):
    # 1 + e^x = 1 / (1 - s)  =>  tanh(softplus) = (1 - u) / (1 + u), u = (1 - s)^2
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    u = (1.0 - s) ** 2
    t = (1.0 - u) / (1.0 + u)
    return x * t, (t, s)


def _mish_grad(x, aux):
    t, s = aux
    return t + x * (1.0 - t * t) * s


def _activate(name, x):
    if name == "mish":
        return _mish(x)
    if name == "relu":
        return np.maximum(x, 0.0), None
    if name == "tanh":
        y = np.tanh(x)
        return y, y
    if name == "identity":
        return x, None
    raise ContractError(f"unknown activation {name!r}")


def _activation_grad(name, x, y, aux):
    if name == "mish":
        return _mish_grad(x, aux)
    if name == "relu":
        return (x > 0.0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - aux * aux
    return None  # identity


def _n_params(layer_sizes):
    return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class MlpParams:
    layer_sizes: tuple[int, ...]
    flat: np.ndarray
    activation: str = "mish"
    output_activation: str = "identity"
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ContractError(f"bad layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output_activation!r}")
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (_n_params(sizes),):
            raise ContractError(
                f"flat parameter vector has shape {flat.shape}, expected ({_n_params(sizes)},)"
            )
        if not np.all(np.isfinite(flat)):
            raise ContractError("network parameters must be finite")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "flat", flat)
        weights, biases = [], []
        offset = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[offset:offset + n_out * n_in].reshape(n_out, n_in))
            offset += n_out * n_in
            biases.append(flat[offset:offset + n_out])
            offset += n_out
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def size(self) -> int:
        return self.flat.size

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        return replace(self, flat=np.array(flat, dtype=np.float64))

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat)

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
            and self.output_activation == other.output_activation
            and np.array_equal(self.flat, other.flat)
        )


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "mish",
    output_activation: str = "identity",
    output_scale: float = 1.0,
) -> MlpParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for W and b."""
    sizes = tuple(int(s) for s in layer_sizes)
    chunks = []
    n_layers = len(sizes) - 1
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        if k == n_layers - 1:
            bound *= output_scale
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    return MlpParams(sizes, np.concatenate(chunks), activation, output_activation)


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return params.with_flat(np.zeros_like(params.flat))


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.n_inputs:
        raise ContractError(
            f"input has shape {np.shape(x)}, network expects {params.n_inputs} features"
        )
    return x, single


def mlp_forward(params: MlpParams, x, return_cache: bool = False):
    """Evaluate the network. Returns ``out`` or ``(out, cache)``."""
    h, single = _as_batch(params, x)
    cache = [h]
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        name = params.activation if k < n_layers - 1 else params.output_activation
        h, aux = _activate(name, z)
        cache.append((z, h, aux, name))
    out = h[0] if single else h
    if return_cache:
        return out, (cache, single)
    return out


def mlp_backward(params: MlpParams, x, upstream_grad, cache=None):
    """Gradients of ``sum(upstream_grad * output)``.

    Returns ``(param_grad, input_grad)`` where ``param_grad`` is flat and
    aligned with ``params.flat`` and ``input_grad`` has the shape of ``x``.
    """
    if cache is None:
        _, cache = mlp_forward(params, x, return_cache=True)
    layers, single = cache
    g = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (layers[0].shape[0], params.n_outputs):
        raise ContractError(
            f"upstream gradient has shape {np.shape(upstream_grad)}, "
            f"expected {(layers[0].shape[0], params.n_outputs)}"
        )
    grads = []
    for k in range(len(params.weights) - 1, -1, -1):
        z, h, aux, name = layers[k + 1]
        dact = _activation_grad(name, z, h, aux)
        if dact is not None:
            g = g * dact
        h_prev = layers[k] if k == 0 else layers[k][1]
        grads.append(g.sum(axis=0))
        grads.append((g.T @ h_prev).ravel())
        g = g @ params.weights[k]
    param_grad = np.concatenate(grads[::-1])
    input_grad = g[0] if single else g
    return param_grad, input_grad


@dataclass(frozen=True, eq=False)
class OptState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(size_or_params, learning_rate: float = 3e-4, **kw) -> OptState:
    n = size_or_params.size if isinstance(size_or_params, MlpParams) else int(size_or_params)
    return OptState(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)


def adam_update(flat: np.ndarray, grads: np.ndarray, state: OptState):
    """Bias-corrected Adam on raw arrays; returns ``(new_flat, new_state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != flat.shape or grads.shape != state.first_moment.shape:
        raise ContractError(
            f"gradient shape {grads.shape} does not match parameters {flat.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = ~np.isfinite(grads)
        raise NonFiniteError(
            "non-finite gradient, update rejected",
            n_bad=int(bad.sum()),
            first_bad_index=int(np.argmax(bad)),
            step=state.step_count,
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_flat = flat - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_flat, replace(state, first_moment=m, second_moment=v, step_count=t)


def adam_step(params: MlpParams, grads, state: OptState) -> tuple[MlpParams, OptState]:
    new_flat, new_state = adam_update(params.flat, grads, state)
    return params.with_flat(new_flat), new_state


def clip_grad_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grads
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def polyak(online: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    """target <- tau * online + (1 - tau) * target."""
    if online.layer_sizes != target.layer_sizes:
        raise ContractError("online and target networks differ in shape")
    if tau == 1.0:
        return online.copy()
    if tau == 0.0:
        return target.copy()
    return target.with_flat(tau * online.flat + (1.0 - tau) * target.flat)


# -- serialization ------------------------------------------------------------

def mlp_to_dict(params: MlpParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "activation": params.activation,
        "output_activation": params.output_activation,
        # float.hex round-trips float64 bit-exactly
        "flat": [float(v).hex() for v in params.flat],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    if d.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported network format version {d.get('format_version')}")
    flat = np.array([float.fromhex(v) for v in d["flat"]], dtype=np.float64)
    return MlpParams(tuple(d["layer_sizes"]), flat, d["activation"], d["output_activation"])


def save_mlp(params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(params), fh)


def load_mlp(path) -> MlpParams:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))
