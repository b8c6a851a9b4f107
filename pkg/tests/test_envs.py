import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccem.envs import EnvSpec, PendulumDense, PointMassSparse, augment, make_env


def test_spec_requires_divisible_length():
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, episode_length=10, action_repeat=4)
    assert EnvSpec("x", 1, 1, episode_length=12, action_repeat=4).decisions_per_episode == 3


def test_pointmass_zero_action_only_friction():
    env = make_env("pointmass-sparse", action_repeat=1)
    env.reset(0)
    env._state = np.array([0.0, 0.0, 0.3, -0.2])
    tr = env.step(np.zeros(2))
    v = 0.85 * np.array([0.3, -0.2])
    np.testing.assert_allclose(tr.o_next[2:], v)
    np.testing.assert_allclose(tr.o_next[:2], 0.1 * v)
    assert tr.r_e == 0.0


def test_pointmass_at_rest_stays_put():
    env = make_env("pointmass-sparse")
    o = env.reset(3)
    tr = env.step(np.zeros(2))
    np.testing.assert_array_equal(tr.o_next, o)


def test_pointmass_reward_inside_goal():
    env = make_env("pointmass-sparse", action_repeat=1)
    env.reset(0)
    env._state = np.concatenate([PointMassSparse.GOAL, np.zeros(2)])
    assert env.step(np.zeros(2)).r_e == 1.0


def test_pendulum_upright_reward_is_max():
    env = make_env("pendulum-dense", action_repeat=1)
    env.reset(0)
    env.set_state(0.0, 0.0)
    assert env.step(np.zeros(1)).r_e == 1.0


@pytest.mark.parametrize("name", ["pointmass-sparse", "pendulum-dense"])
def test_action_repeat_matches_unit_steps(name):
    env_a = make_env(name, action_repeat=4)
    env_b = make_env(name, action_repeat=1)
    env_a.reset(7), env_b.reset(7)
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.uniform(-1, 1, env_a.spec.action_dim)
        tr = env_a.step(a)
        total = sum(env_b.unit_step(a) for _ in range(4))
        assert tr.r_e == total
        np.testing.assert_array_equal(tr.o_next, env_b._obs())
    assert env_a.t == 20


@pytest.mark.parametrize("name", ["pointmass-sparse", "pendulum-dense"])
def test_determinism(name):
    rng = np.random.default_rng(1)
    acts = rng.uniform(-1, 1, (30, make_env(name).spec.action_dim))
    runs = []
    for _ in range(2):
        env = make_env(name)
        obs = [env.reset(11)]
        obs += [env.step(a).o_next for a in acts]
        runs.append(np.array(obs))
    np.testing.assert_array_equal(runs[0], runs[1])


def test_out_of_bounds_actions_are_clamped_and_counted():
    env = make_env("pointmass-sparse")
    env.reset(0)
    tr = env.step(np.array([3.0, -0.5]))
    np.testing.assert_array_equal(tr.a, [1.0, -0.5])
    assert env.clamp_count == 1
    env.step(np.array([0.5, -0.5]))
    assert env.clamp_count == 1


def test_episode_ends_at_length():
    env = make_env("pointmass-sparse", episode_length=8, action_repeat=2)
    env.reset(0)
    dones = [env.step(np.zeros(2)).done for _ in range(4)]
    assert dones == [False, False, False, True]
    with pytest.raises(RuntimeError):
        env.step(np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_reward_ranges(seed):
    rng = np.random.default_rng(seed)
    for name, unit in (("pointmass-sparse", {0.0, 1.0}), ("pendulum-dense", None)):
        env = make_env(name, action_repeat=1, episode_length=50)
        env.reset(seed)
        for _ in range(50):
            r = env.step(rng.uniform(-1, 1, env.spec.action_dim)).r_e
            if unit is not None:
                assert r in unit
            else:
                assert 0.0 <= r <= 1.0


def test_pointmass_stays_in_box():
    env = make_env("pointmass-sparse", episode_length=1000, action_repeat=1)
    env.reset(0)
    for _ in range(1000):
        o = env.step(np.ones(2)).o_next
        assert np.all(np.abs(o[:2]) <= 1.0)


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("nope")


def test_augment_identity_and_statistics():
    o = np.arange(4.0)
    np.testing.assert_array_equal(augment(o, 0.0), o)
    rng = np.random.default_rng(0)
    draws = augment(np.zeros(100_000), 0.3, rng)
    assert abs(draws.mean()) < 3 * 0.3 / np.sqrt(draws.size)
    assert abs(draws.std() / 0.3 - 1.0) < 0.05
    with pytest.raises(ValueError):
        augment(o, -1.0)


def test_pendulum_starts_near_bottom():
    env = PendulumDense()
    o = env.reset(0)
    assert o[0] < -0.99  # cos(theta) near -1
