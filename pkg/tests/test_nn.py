import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dac4rec.errors import ContractError, NonFiniteError
from dac4rec.nn import (MlpParams, adam_init, adam_step, adam_update, clip_grad_norm, init_mlp, load_mlp,
                        mlp_backward, mlp_forward, mlp_from_dict, mlp_to_dict, polyak, save_mlp, zeros_like_mlp)

from helpers import central_diff, rel_err


def naive_forward(params, x):
    """Scalar-by-scalar forward pass, independent of the vectorized code."""
    def act(name, v):
        if name == "identity":
            return v
        if name == "tanh":
            return np.tanh(v)
        if name == "relu":
            return max(v, 0.0)
        return v * np.tanh(np.log1p(np.exp(v)))

    h = list(x)
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        name = params.activation if k < n_layers - 1 else params.output_activation
        out = []
        for i in range(w.shape[0]):
            z = b[i]
            for j in range(w.shape[1]):
                z += w[i, j] * h[j]
            out.append(act(name, z))
        h = out
    return np.array(h)


def test_zero_network_outputs_zero(rng):
    p = zeros_like_mlp(init_mlp((3, 5, 2), rng))
    np.testing.assert_array_equal(mlp_forward(p, rng.standard_normal(3)), np.zeros(2))


def test_identity_single_layer():
    flat = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    p = MlpParams((3, 3), flat)
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(mlp_forward(p, x), x)


@pytest.mark.parametrize("activation", ["mish", "relu", "tanh"])
@pytest.mark.parametrize("out_act", ["identity", "tanh"])
def test_forward_matches_naive_loop(activation, out_act):
    rng = np.random.default_rng(3)
    p = init_mlp((4, 6, 3), rng, activation, out_act)
    for _ in range(5):
        x = rng.standard_normal(4) * 2
        assert rel_err(mlp_forward(p, x), naive_forward(p, x), floor=1e-300) < 1e-12


def test_batch_and_single_agree(rng):
    p = init_mlp((4, 8, 8, 2), rng)
    x = rng.standard_normal((7, 4))
    batch = mlp_forward(p, x)
    for k in range(7):
        np.testing.assert_allclose(mlp_forward(p, x[k]), batch[k], rtol=0, atol=1e-15)


def test_dimension_mismatch_raises(rng):
    p = init_mlp((4, 3, 2), rng)
    with pytest.raises(ContractError):
        mlp_forward(p, np.zeros(5))
    with pytest.raises(ContractError):
        mlp_backward(p, np.zeros(4), np.zeros(3))
    with pytest.raises(ContractError):
        MlpParams((4, 2), np.zeros(3))


def test_non_finite_parameters_rejected():
    with pytest.raises(ContractError):
        MlpParams((1, 1), np.array([np.nan, 0.0]))


def test_zero_upstream_gives_zero_grads(rng):
    p = init_mlp((3, 4, 2), rng)
    pg, xg = mlp_backward(p, rng.standard_normal(3), np.zeros(2))
    assert not pg.any() and not xg.any()


def test_linear_net_weight_grad_closed_form(rng):
    p = init_mlp((3, 2), rng)
    x, up = rng.standard_normal(3), rng.standard_normal(2)
    pg, xg = mlp_backward(p, x, up)
    np.testing.assert_array_equal(pg[:6].reshape(2, 3), np.outer(up, x))
    np.testing.assert_array_equal(pg[6:], up)
    np.testing.assert_allclose(xg, p.weights[0].T @ up, rtol=1e-14)


@pytest.mark.parametrize("seed", range(50))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    depth = 1 + seed % 3
    sizes = (int(rng.integers(1, 6)), *[int(rng.integers(2, 10)) for _ in range(depth)], 1)
    activation = ("mish", "tanh", "relu")[seed % 3]
    p = init_mlp(sizes, rng, activation, ("identity", "tanh")[seed % 2])
    x = rng.standard_normal((3, sizes[0]))
    up = np.ones((3, 1))
    pg, xg = mlp_backward(p, x, up)
    f_params = lambda flat: float(mlp_forward(p.with_flat(flat), x).sum())
    f_input = lambda xx: float(mlp_forward(p, xx).sum())
    # relu kinks are measure-zero for random inputs; keep the h small
    assert rel_err(pg, central_diff(f_params, p.flat)) < 1e-4
    assert rel_err(xg, central_diff(f_input, x)) < 1e-4


def test_adam_zero_gradient_is_fixed_point(rng):
    p = init_mlp((2, 3, 1), rng)
    new, st_ = adam_step(p, np.zeros(p.size), adam_init(p, 0.1))
    assert new == p and st_.step_count == 1


def test_adam_first_step_magnitude():
    # scalar by hand: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
    g, lr, eps = 0.37, 0.05, 1e-8
    new, _ = adam_update(np.array([1.0]), np.array([g]), adam_init(1, lr, epsilon=eps))
    assert new[0] == pytest.approx(1.0 - lr * g / (abs(g) + eps), rel=1e-12)


def test_adam_quadratic_converges():
    x, state = np.array([1.0]), adam_init(1, 0.1)
    for _ in range(200):
        x, state = adam_update(x, 2 * x, state)
    assert abs(x[0]) < 0.05 and state.step_count == 200


def test_adam_rejects_non_finite_gradient():
    state = adam_init(3, 0.1)
    with pytest.raises(NonFiniteError) as err:
        adam_update(np.zeros(3), np.array([0.0, np.inf, 1.0]), state)
    assert err.value.diagnostics["first_bad_index"] == 1
    assert state.step_count == 0


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_grad_norm(g, 1.0), [0.6, 0.8])
    assert clip_grad_norm(g, None) is g
    np.testing.assert_array_equal(clip_grad_norm(g, 10.0), g)


def test_polyak_convex_combination(rng):
    a, b = init_mlp((2, 2), rng), init_mlp((2, 2), rng)
    assert polyak(a, b, 1.0) == a
    assert polyak(a, b, 0.0) == b
    np.testing.assert_allclose(polyak(a, b, 0.25).flat, 0.25 * a.flat + 0.75 * b.flat)


def test_serialization_round_trip_bit_exact(tmp_path, rng):
    p = init_mlp((3, 7, 2), rng, "tanh", "tanh")
    save_mlp(p, tmp_path / "net.json")
    q = load_mlp(tmp_path / "net.json")
    assert q == p
    d = mlp_to_dict(p)
    assert d["format_version"] == 1
    d["format_version"] = 99
    with pytest.raises(ContractError):
        mlp_from_dict(json.loads(json.dumps(d)))


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = init_mlp((2, 8, 1), rng)
        st_ = adam_init(p, 1e-2)
        x = rng.standard_normal((16, 2))
        y = np.sin(x[:, :1])
        for _ in range(50):
            out, cache = mlp_forward(p, x, return_cache=True)
            g, _ = mlp_backward(p, x, 2 * (out - y) / 16, cache)
            p, st_ = adam_step(p, g, st_)
        return p.flat
    np.testing.assert_array_equal(run(), run())


@given(st.lists(st.integers(1, 8), min_size=2, max_size=5), st.integers(0, 2**31 - 1),
       st.sampled_from(["mish", "relu", "tanh"]))
def test_output_shape_and_finiteness(sizes, seed, activation):
    rng = np.random.default_rng(seed)
    p = init_mlp(sizes, rng, activation)
    out = mlp_forward(p, rng.standard_normal((4, sizes[0])) * 10)
    assert out.shape == (4, sizes[-1]) and np.all(np.isfinite(out))
    assert sum(w.size + b.size for w, b in zip(p.weights, p.biases)) == p.size
    for w, (n_in, n_out) in zip(p.weights, zip(sizes[:-1], sizes[1:])):
        assert w.shape == (n_out, n_in)


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 1.0))
def test_adam_step_count_increments_by_one(seed, lr):
    rng = np.random.default_rng(seed)
    state = adam_init(5, lr)
    x = rng.standard_normal(5)
    for k in range(3):
        x, state = adam_update(x, rng.standard_normal(5), state)
        assert state.step_count == k + 1
        assert state.first_moment.shape == x.shape == state.second_moment.shape
