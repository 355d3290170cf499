import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from dac4rec import env as envmod
from dac4rec.env import (BehaviorSpec, EnvConfig, behavior_action, env_reset, env_step, generate_dataset,
                         generate_multi_logger_dataset, popular_item_logger,
                         oracle_action)
from dac4rec.errors import ConfigError, ContractError

QUIET = EnvConfig(reward_noise_sigma=0.0, boredom_strength=0.0)


def test_reset_determinism_and_start():
    a, b = env_reset(QUIET, np.random.default_rng(3)), env_reset(QUIET, np.random.default_rng(3))
    np.testing.assert_array_equal(a.observation, b.observation)
    np.testing.assert_array_equal(a.latent_preference, b.latent_preference)
    assert a.step_index == 0 and a.engagement == 1.0
    assert np.linalg.norm(a.latent_preference) == pytest.approx(1.0)


def test_reset_preference_is_sphere_uniform():
    rng = np.random.default_rng(0)
    prefs = np.array([env_reset(QUIET, rng).latent_preference for _ in range(10_000)])
    assert np.all(np.abs(prefs.mean(axis=0)) < 0.05)


def test_observation_hides_preference():
    st_ = env_reset(QUIET, np.random.default_rng(1))
    assert st_.observation.shape == (QUIET.state_dim,)
    for k in range(QUIET.state_dim - QUIET.action_dim + 1):
        assert not np.allclose(st_.observation[k:k + QUIET.action_dim], st_.latent_preference)


def test_aligned_and_opposed_rewards():
    rng = np.random.default_rng(2)
    st_ = env_reset(QUIET, rng)
    p = st_.latent_preference
    assert env_step(QUIET, st_, p, rng)[1] == pytest.approx(1.0, abs=1e-12)
    assert env_step(QUIET, st_, -p, rng)[1] == pytest.approx(0.0, abs=1e-12)


def test_random_policy_mean_reward():
    rng = np.random.default_rng(4)
    rewards, st_, done = [], env_reset(QUIET, rng), False
    while len(rewards) < 10_000:
        if done:
            st_ = env_reset(QUIET, rng)
        st_, r, done = env_step(QUIET, st_, rng.uniform(-1, 1, QUIET.action_dim), rng)
        rewards.append(r)
    assert np.mean(rewards) == pytest.approx(0.5, abs=0.02)


def test_step_contracts():
    rng = np.random.default_rng(0)
    st_ = env_reset(QUIET, rng)
    with pytest.raises(ContractError):
        env_step(QUIET, st_, [np.nan, 0, 0, 0], rng)
    with pytest.raises(ContractError):
        env_step(QUIET, st_, [0.1, 0.2], rng)
    before = envmod.counters["action_clamped"]
    nxt, _, _ = env_step(QUIET, st_, [3.0, 0, 0, 0], rng)
    assert envmod.counters["action_clamped"] == before + 1
    np.testing.assert_array_equal(nxt.last_action, [1.0, 0, 0, 0])


def test_engagement_falls_faster_after_bad_recommendations():
    cfg = replace(QUIET, fatigue_min=0.02, fatigue_max=0.02)
    rng = np.random.default_rng(5)
    st_ = env_reset(cfg, rng)
    good, _, _ = env_step(cfg, st_, st_.latent_preference, np.random.default_rng(0))
    bad, _, _ = env_step(cfg, st_, -st_.latent_preference, np.random.default_rng(0))
    assert bad.engagement < good.engagement < 1.0


def test_config_validation():
    with pytest.raises(ConfigError):
        EnvConfig(action_dim=0)
    with pytest.raises(ConfigError):
        EnvConfig(preference_drift=-0.1)
    with pytest.raises(ConfigError):
        BehaviorSpec(kind="greedy")
    with pytest.raises(ConfigError):
        BehaviorSpec(epsilon=1.5)
    with pytest.raises(ConfigError):
        BehaviorSpec(kind="mixture_gaussian")


def test_three_step_trajectory_counting():
    cfg = replace(QUIET, max_steps=3)
    ds = generate_dataset(cfg, BehaviorSpec(), 1, rng=np.random.default_rng(0))
    assert len(ds) == 3
    assert set(ds.trajectory_ids.tolist()) == {0}
    assert ds.dones.tolist() == [False, False, True]
    np.testing.assert_array_equal(ds.states[1:], ds.next_states[:-1])
    assert ds.metadata["behavior"]["kind"] == "epsilon_greedy_oracle"


def test_metadata_records_seed_and_behavior():
    spec = BehaviorSpec(kind="stale_oracle", staleness_lag=4)
    ds = generate_dataset(QUIET, spec, 2, rng=11)
    assert ds.metadata["seed"] == 11
    assert BehaviorSpec.from_dict(ds.metadata["behavior"]) == spec
    assert EnvConfig(**ds.metadata["env_config"]) == QUIET


def test_mixture_behavior_is_bimodal():
    spec = BehaviorSpec(kind="mixture_gaussian", means=((0.8,) * 4, (-0.8,) * 4), sigma=0.1)
    ds = generate_dataset(QUIET, spec, 40, rng=np.random.default_rng(1))
    x = ds.actions[:, 0]
    assert np.mean(np.abs(x - 0.8) < 0.2) >= 0.35
    assert np.mean(np.abs(x + 0.8) < 0.2) >= 0.35
    assert np.mean(np.abs(x) < 0.3) < 0.05


def oracle_mean_reward(cfg, n, seed):
    rng = np.random.default_rng(seed)
    rewards = []
    for _ in range(n):
        st_, done = env_reset(cfg, rng), False
        while not done:
            st_, r, done = env_step(cfg, st_, oracle_action(cfg, st_), rng)
            rewards.append(r)
    return float(np.mean(rewards))


def test_greedy_dataset_matches_oracle():
    cfg = EnvConfig()
    ds = generate_dataset(cfg, BehaviorSpec(epsilon=0.0), 100, rng=np.random.default_rng(7))
    assert ds.rewards.mean() == pytest.approx(oracle_mean_reward(cfg, 100, 8), abs=0.05)


@pytest.mark.parametrize("cfg,spec", [
    (EnvConfig(), BehaviorSpec(epsilon=0.4)),
    # sessions average ~21 steps, so staleness only bites once the drift is faster
    (EnvConfig(preference_drift=0.05), BehaviorSpec(kind="stale_oracle", staleness_lag=20)),
])
def test_improvability_gap(cfg, spec):
    ds = generate_dataset(cfg, spec, 100, rng=np.random.default_rng(9))
    assert ds.rewards.mean() <= oracle_mean_reward(cfg, 100, 10) - 0.1


def test_initial_preference_policy_decays():
    cfg = replace(EnvConfig(), fatigue_min=0.0, fatigue_max=0.0, disengage_rate=0.0)
    rng = np.random.default_rng(12)
    early, late = [], []
    for _ in range(200):
        st_ = env_reset(cfg, rng)
        p0, done, t = st_.initial_preference, False, 0
        while not done:
            st_, r, done = env_step(cfg, st_, p0, rng)
            t += 1
            if t <= 10:
                early.append(r)
            elif t >= 31:
                late.append(r)
    assert np.mean(early) - np.mean(late) >= 0.1


def test_trajectory_determinism_for_fixed_actions():
    actions = np.random.default_rng(0).uniform(-1, 1, (40, 4))

    def run():
        rng = np.random.default_rng(21)
        st_, out = env_reset(EnvConfig(), rng), []
        for a in actions:
            st_, r, done = env_step(EnvConfig(), st_, a, rng)
            out.append(np.concatenate([st_.observation, [r, done]]))
            if done:
                break
        return np.array(out)

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(0.0, 0.2))
def test_reward_bounds_fuzz(seed, boredom, noise, drift):
    cfg = EnvConfig(boredom_strength=boredom, reward_noise_sigma=noise, preference_drift=drift, max_steps=50)
    rng = np.random.default_rng(seed)
    st_, done, n = env_reset(cfg, rng), False, 0
    while n < 400:
        if done:
            st_ = env_reset(cfg, rng)
        st_, r, done = env_step(cfg, st_, rng.uniform(-1.5, 1.5, cfg.action_dim), rng)
        assert 0.0 <= r <= 1.0
        assert 0.0 <= st_.engagement <= 1.0
        assert st_.step_index <= cfg.max_steps
        n += 1


@pytest.mark.slow
def test_reward_bounds_million_steps():
    cfg = EnvConfig(boredom_strength=0.5, reward_noise_sigma=0.3)
    rng = np.random.default_rng(0)
    st_, done, lo, hi = env_reset(cfg, rng), False, 1.0, 0.0
    for a in rng.uniform(-1.2, 1.2, (1_000_000, cfg.action_dim)):
        if done:
            st_ = env_reset(cfg, rng)
        st_, r, done = env_step(cfg, st_, a, rng)
        lo, hi = min(lo, r), max(hi, r)
    assert 0.0 <= lo and hi <= 1.0


@given(st.integers(0, 10_000), st.sampled_from(["mixture_gaussian", "epsilon_greedy_oracle", "stale_oracle"]))
def test_behavior_actions_in_cube(seed, kind):
    spec = BehaviorSpec(kind=kind, means=((1.2, -0.9, 0.0, 0.5),), sigma=0.5, epsilon=0.3, staleness_lag=5)
    rng = np.random.default_rng(seed)
    st_ = env_reset(EnvConfig(), rng)
    a = behavior_action(EnvConfig(), spec, st_, rng)
    assert a.shape == (4,) and np.all(np.abs(a) <= 1.0)


def test_multi_logger_dataset():
    cfg = EnvConfig(max_steps=12)
    parts = [(BehaviorSpec(epsilon=0.0), 6), (popular_item_logger(cfg), 4)]
    ds = generate_multi_logger_dataset(cfg, parts, seed=5)
    assert len(np.unique(ds.trajectory_ids)) == 10
    assert ds.metadata["behavior"]["kind"] == "multi_logger" and ds.metadata["n_trajectories"] == 10
    late = ds.actions[ds.trajectory_ids >= 6]
    np.testing.assert_allclose(late.mean(axis=0), [0.6, -0.6, 0.6, -0.6], atol=0.05)
    again = generate_multi_logger_dataset(cfg, parts, seed=5)
    assert again.equals(ds)
