import numpy as np
import pytest
from hypothesis import given, strategies as st

from dac4rec import improvement as imp
from dac4rec.behavior import diffusion_bc_loss, draw_noising
from dac4rec.critic import init_critics
from dac4rec.data import TransitionBatch
from dac4rec.diffusion import forward_noise, init_noise_model, make_schedule, sample_action
from dac4rec.errors import ConfigError
from dac4rec.improvement import (ImprovementConfig, awr_weight, combined_policy_update, elbo_coefficients,
                                 q_loss_awr_approx, q_loss_direct, q_loss_elbo_weighted)
from dac4rec.nn import adam_init

from helpers import central_diff, rel_err


class StubQ:
    """Critic stand-in defined by a value function and its action gradient."""

    def __init__(self, f, df):
        self.f, self.df = f, df

    def value(self, s, a, use_target=False):
        return self.f(np.atleast_2d(a))

    def value_and_grad(self, s, a):
        a = np.atleast_2d(a)
        return self.f(a), self.df(a)


def bowl(target):
    target = np.asarray(target, dtype=np.float64)
    return StubQ(lambda a: -np.sum((a - target) ** 2, axis=1), lambda a: -2 * (a - target))


CONST_Q = StubQ(lambda a: np.full(a.shape[0], 3.0), lambda a: np.zeros_like(a))


def make_batch(rng, n=16, sd=3, ad=2):
    return TransitionBatch(rng.standard_normal((n, sd)), rng.uniform(-1, 1, (n, ad)), rng.uniform(0, 1, n),
                           rng.standard_normal((n, sd)), np.zeros(n, dtype=bool))


def test_awr_weight_examples():
    cfg = ImprovementConfig(awr_temperature=0.7, awr_weight_clip=50.0)
    assert awr_weight(1.3, 1.3, cfg) == 1.0
    assert awr_weight(0.7 * np.log(2), 0.0, cfg) == pytest.approx(2.0, rel=1e-14)
    assert awr_weight(1e6, 0.0, cfg) == pytest.approx(50.0, rel=1e-14)


@given(st.floats(0.01, 10), st.floats(1, 1000), st.lists(st.floats(-50, 50), min_size=2, max_size=20),
       st.floats(-5, 5))
def test_awr_weight_monotone(temp, clip, qs, baseline):
    cfg = ImprovementConfig(awr_temperature=temp, awr_weight_clip=clip)
    qs = np.sort(np.array(qs))
    w = awr_weight(qs, baseline, cfg)
    assert np.all(np.diff(w) >= 0) and np.all(w >= 0) and np.all(w <= clip * (1 + 1e-12))


def test_doubling_advantages_adds_mass_above_baseline():
    cfg = ImprovementConfig(awr_temperature=1.0)
    adv = np.array([-1.0, -0.2, 0.3, 0.9, 2.0])
    above = adv > 0
    assert awr_weight(2 * adv, 0.0, cfg)[above].sum() > awr_weight(adv, 0.0, cfg)[above].sum()


@pytest.mark.parametrize("kw", [dict(variant="x"), dict(lam=-1.0), dict(awr_temperature=0.0),
                                dict(awr_weight_clip=0.5), dict(awr_baseline="median")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ImprovementConfig(**kw)


def test_elbo_coefficients_first_step_convention():
    sched = make_schedule(20)
    c = elbo_coefficients(sched, np.array([1, 2, 20]))
    assert c[0] == pytest.approx(sched.beta[0] / (2 * sched.alpha[0]), rel=1e-15)
    assert c[1] == pytest.approx(sched.beta[1] / (2 * sched.alpha[1] * (1 - sched.alpha_bar[0])), rel=1e-15)
    assert np.all(np.isfinite(c)) and np.all(c > 0)


def test_direct_gradient_points_toward_optimum(rng):
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (16,), rng)
    batch = make_batch(rng, 64)
    target = np.array([0.6, -0.4])
    cfg = ImprovementConfig(variant="direct", q_normalize=False)

    def mean_dist(m):
        a0_hat, *_ = imp._reconstruct(m, sched, batch.states, batch.actions, np.random.default_rng(2))
        return np.mean(np.sum((a0_hat - target) ** 2, axis=1))

    _, grads = q_loss_direct(bowl(target), model, sched, batch, np.random.default_rng(2), cfg)
    stepped = model.with_net(model.net.with_flat(model.net.flat - 1e-3 * grads / np.linalg.norm(grads)))
    assert mean_dist(stepped) < mean_dist(model)
    # the stub's action gradient itself agrees with finite differences in sign
    a = rng.uniform(-1, 1, (1, 2))
    _, g = bowl(target).value_and_grad(None, a)
    fd = central_diff(lambda x: float(bowl(target).value(None, x)[0]), a)
    assert np.array_equal(np.sign(g), np.sign(fd)) and np.array_equal(np.sign(g), np.sign(target - a))


def test_direct_flat_q_gives_no_gradient(rng):
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (8,), rng)
    _, grads = q_loss_direct(CONST_Q, model, sched, make_batch(rng), rng, ImprovementConfig(variant="direct"))
    assert np.linalg.norm(grads) < 1e-8


@pytest.mark.parametrize("loss_fn", [q_loss_direct, q_loss_elbo_weighted, q_loss_awr_approx])
@pytest.mark.parametrize("seed", range(50))
def test_q_loss_gradients_finite_differences(loss_fn, seed):
    rng = np.random.default_rng(seed + 7000)
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (6, 6), rng)
    critics = init_critics(3, 2, (6,), rng)
    batch = make_batch(rng, 5)
    # the |Q| normalizer is a stop-gradient constant, so check the raw objective here
    cfg = ImprovementConfig(variant=loss_fn.__name__.replace("q_loss_", ""), awr_temperature=0.5,
                            q_normalize=False)
    _, grads = loss_fn(critics, model, sched, batch, np.random.default_rng(seed), cfg)
    f = lambda flat: loss_fn(critics, model.with_net(model.net.with_flat(flat)), sched, batch,
                             np.random.default_rng(seed), cfg)[0]
    assert rel_err(grads, central_diff(f, model.net.flat)) < 1e-4


def test_q_normalize_rescales_direct_gradient(rng):
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (6,), rng)
    critics = init_critics(3, 2, (6,), rng)
    batch = make_batch(rng, 8)
    on = ImprovementConfig(variant="direct", q_normalize=True)
    off = ImprovementConfig(variant="direct", q_normalize=False)
    l1, g1 = q_loss_direct(critics, model, sched, batch, np.random.default_rng(0), on)
    l0, g0 = q_loss_direct(critics, model, sched, batch, np.random.default_rng(0), off)
    scale = l0 / l1
    np.testing.assert_allclose(g1 * scale, g0, rtol=1e-12, atol=1e-16)


def test_elbo_reduces_to_bc_with_unit_weights(rng, monkeypatch):
    monkeypatch.setattr(imp, "elbo_coefficients", lambda schedule, steps: np.ones(len(steps)))
    sched = make_schedule(15)
    model = init_noise_model(2, 3, (8,), rng)
    batch = make_batch(rng)
    cfg = ImprovementConfig(variant="elbo_weighted")
    loss, grads = q_loss_elbo_weighted(CONST_Q, model, sched, batch, np.random.default_rng(3), cfg)
    bc = diffusion_bc_loss(model, sched, batch, np.random.default_rng(3))
    assert loss == pytest.approx(bc.loss, rel=1e-14)
    np.testing.assert_allclose(grads, bc.grads, rtol=1e-12, atol=1e-15)


def test_elbo_matches_naive_loop(rng):
    sched = make_schedule(12)
    model = init_noise_model(2, 3, (8,), rng)
    critics = init_critics(3, 2, (8,), rng)
    batch = make_batch(rng, 10)
    cfg = ImprovementConfig(variant="elbo_weighted", awr_temperature=0.3, awr_weight_clip=5.0)
    loss, _ = q_loss_elbo_weighted(critics, model, sched, batch, np.random.default_rng(8), cfg)
    steps, eps, noisy = draw_noising(sched, batch.actions, np.random.default_rng(8))
    q = [critics.value(batch.states[k], batch.actions[k])[0] for k in range(10)]
    base = sum(q) / 10
    total = 0.0
    for k in range(10):
        i = steps[k]
        abar_prev = 1.0 if i == 1 else np.prod(1 - sched.beta[:i - 1])
        coef = sched.beta[i - 1] / (2 * (1 - sched.beta[i - 1]) * (1 - abar_prev if i > 1 else 1.0))
        g = min(np.exp((q[k] - base) / 0.3), 5.0)
        r = model(noisy[k], batch.states[k], i) - eps[k]
        total += coef * g * float(r @ r)
    assert loss == pytest.approx(total / 10, rel=1e-12)


def test_awr_perfect_reconstruction_zero_loss(rng):
    sched = make_schedule(10)
    batch = make_batch(rng)
    steps, eps, _ = draw_noising(sched, batch.actions, np.random.default_rng(5))
    loss, grads = q_loss_awr_approx(init_critics(3, 2, (4,), rng), lambda a, s, i: eps, sched, batch,
                                    np.random.default_rng(5), ImprovementConfig())
    assert loss == pytest.approx(0.0, abs=1e-20) and grads is None


def test_awr_unit_weights_is_reconstruction_mse(rng):
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (8,), rng)
    batch = make_batch(rng)
    loss, _ = q_loss_awr_approx(CONST_Q, model, sched, batch, np.random.default_rng(6), ImprovementConfig())
    a0_hat, *_ = imp._reconstruct(model, sched, batch.states, batch.actions, np.random.default_rng(6))
    assert loss == pytest.approx(np.mean(np.sum((a0_hat - batch.actions) ** 2, axis=1)), rel=1e-13)


@pytest.mark.parametrize("variant", ["direct", "elbo_weighted", "awr_approx"])
def test_lambda_zero_is_bitwise_behavior_cloning(variant, rng):
    sched = make_schedule(10)
    model = init_noise_model(2, 3, (8,), rng)
    critics = init_critics(3, 2, (8,), rng)
    batch = make_batch(rng)
    opt = adam_init(model.net, 1e-3)
    m1, _, rep = combined_policy_update(model, critics, sched, batch, np.random.default_rng(1),
                                        ImprovementConfig(variant=variant, lam=0.0), opt)
    bc = diffusion_bc_loss(model, sched, batch, np.random.default_rng(1))
    from dac4rec.nn import adam_update
    flat, _ = adam_update(model.net.flat, bc.grads, opt)
    assert np.array_equal(m1.net.flat, flat)
    assert rep["L_q"] == 0.0 and rep["L"] == rep["L_d"]


@given(st.floats(0.0, 5.0), st.sampled_from(["direct", "elbo_weighted", "awr_approx"]), st.integers(0, 1000))
def test_report_identity(lam, variant, seed):
    rng = np.random.default_rng(seed)
    sched = make_schedule(8)
    model = init_noise_model(1, 2, (4,), rng)
    critics = init_critics(2, 1, (4,), rng)
    batch = make_batch(rng, 8, 2, 1)
    cfg = ImprovementConfig(variant=variant, lam=lam)
    _, _, rep = combined_policy_update(model, critics, sched, batch, rng, cfg, adam_init(model.net))
    assert abs(rep["L"] - (rep["L_d"] + lam * rep["L_q"])) <= 1e-12 * max(1.0, abs(rep["L"]))


BANDIT_Q = StubQ(lambda a: -(a[:, 0] - 0.5) ** 2, lambda a: -2 * (a - 0.5))


def _bandit_batch(rng, n=64):
    a = rng.uniform(-1, 1, (n, 1))
    return TransitionBatch(np.zeros((n, 1)), a, np.zeros(n), np.zeros((n, 1)), np.zeros(n, dtype=bool))


@pytest.mark.slow
def test_bandit_variants_agree():
    """From one BC initialization every variant moves the sample mean from the
    data mean (0) toward the optimum 0.5; the two likelihood variants land close."""
    sched = make_schedule(10)
    rng = np.random.default_rng(0)
    model = init_noise_model(1, 1, (32, 32), rng)
    opt = adam_init(model.net, 1e-3)
    for _ in range(2000):
        model, opt, _ = combined_policy_update(model, BANDIT_Q, sched, _bandit_batch(rng), rng,
                                               ImprovementConfig(lam=0.0), opt)
    start = sample_action(model, sched, np.zeros((1000, 1)), rng).mean()
    assert abs(start) < 0.1
    means = {}
    for variant in ["direct", "elbo_weighted", "awr_approx"]:
        cfg = ImprovementConfig(variant=variant, lam=1.0, awr_temperature=0.1)
        m, o, r = model, opt, np.random.default_rng(1)
        for _ in range(10_000):
            m, o, _ = combined_policy_update(m, BANDIT_Q, sched, _bandit_batch(r), r, cfg, o)
        means[variant] = sample_action(m, sched, np.zeros((2000, 1)), r).mean()
    for variant, mean in means.items():
        assert mean - start >= 0.25, (variant, mean)
    assert abs(means["elbo_weighted"] - means["awr_approx"]) < 0.1
