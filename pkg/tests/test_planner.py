import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccem.oracles import (
    LinearLatentModel,
    argmax_recovery_errors,
    exhaustive_sequence_search,
    grid_argmax,
    multistep_planning_ratios,
    quadratic_scorer,
    small_model,
)
from ccem.planner import (
    CemConfig,
    DegenerateModelError,
    PlanDistribution,
    Scoring,
    cem_optimize,
    plan,
    policy_sequences,
    score_sequence,
    score_sequences,
)


@pytest.fixture
def model():
    return small_model(np.random.default_rng(0))


def test_sum_rewards_h0_is_reward(model):
    z = model.encode(np.ones(4))
    a = np.array([0.3, -0.4])
    cfg = CemConfig(horizon=0, scoring=Scoring.SUM_REWARDS)
    assert score_sequence(model, z, a[None], cfg) == model.predict_reward(z, a)


@pytest.mark.parametrize("scoring", list(Scoring))
def test_gamma_zero_reduces_to_first_term(model, scoring):
    z = model.encode(np.ones(4))
    seq = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    cfg = CemConfig(horizon=3, gamma=0.0, scoring=scoring)
    first = model.predict_reward(z, seq[0]) if scoring is Scoring.SUM_REWARDS else model.predict_q(z, seq[0])
    if scoring is Scoring.REWARDS_PLUS_TERMINAL:
        first = model.predict_reward(z, seq[0])
    assert score_sequence(model, z, seq, cfg) == pytest.approx(float(first), abs=1e-15)


def test_value_sum_variants_bitwise_equal(model):
    z = model.encode(np.ones(4))
    seqs = np.random.default_rng(1).uniform(-1, 1, (32, 6, 2))
    a = score_sequences(model, z, seqs, CemConfig(scoring=Scoring.VALUE_SUM))
    b = score_sequences(model, z, seqs, CemConfig(scoring=Scoring.CURIOSITY_VALUE_SUM))
    assert a.tobytes() == b.tobytes()


def test_score_matches_manual_rollout(model):
    z0 = model.encode(np.ones(4))
    seq = np.random.default_rng(2).uniform(-1, 1, (3, 2))
    cfg = CemConfig(horizon=2, gamma=0.9, scoring=Scoring.REWARDS_PLUS_TERMINAL)
    z1 = model.dynamics_step(z0, seq[0])
    z2 = model.dynamics_step(z1, seq[1])
    expected = model.predict_reward(z0, seq[0]) + 0.9 * model.predict_reward(z1, seq[1]) + 0.81 * model.predict_q(z2, seq[2])
    assert score_sequence(model, z0, seq, cfg) == pytest.approx(float(expected), rel=1e-12)


def test_non_finite_scores_become_minus_inf():
    cfg = CemConfig(horizon=0, population=8, elites=2, iterations=1, policy_fraction=0.0)
    calls = []

    def score(s):
        out = -np.sum(s[:, 0] ** 2, axis=-1)
        out[:4] = np.nan
        calls.append(out)
        return out

    dist, _ = cem_optimize(score, cfg, 2, np.random.default_rng(0))
    assert np.all(np.isfinite(dist.mean))


def test_all_non_finite_raises():
    cfg = CemConfig(horizon=0, population=8, elites=2, iterations=1)
    with pytest.raises(DegenerateModelError, match="degenerate"):
        cem_optimize(lambda s: np.full(len(s), np.inf), cfg, 2, np.random.default_rng(0))


def test_constant_score_selects_first_k_samples():
    cfg = CemConfig(horizon=1, population=64, elites=8, iterations=1, min_std=1e-6)
    rng = np.random.default_rng(3)
    dist, _ = cem_optimize(lambda s: np.zeros(len(s)), cfg, 2, rng)
    eps = np.random.default_rng(3).standard_normal((64, 2, 2))
    first = np.clip(eps, -1, 1)[:8]
    np.testing.assert_allclose(dist.mean, first.mean(axis=0))
    np.testing.assert_allclose(dist.std, np.maximum(first.std(axis=0), 1e-6))


def test_constant_score_mean_near_zero_over_many_plans():
    cfg = CemConfig(horizon=0, population=64, elites=32, iterations=1)
    rng = np.random.default_rng(0)
    means = [cem_optimize(lambda s: np.zeros(len(s)), cfg, 2, rng)[0].mean[0] for _ in range(200)]
    # each mean averages 32 clipped standard normals
    assert np.all(np.abs(np.mean(means, axis=0)) < 4 * 0.9 / np.sqrt(32 * 200))


def test_ties_prefer_lower_index():
    cfg = CemConfig(horizon=0, population=4, elites=1, iterations=1, policy_fraction=0.0, min_std=1e-3)
    extra = np.array([[[0.5, 0.5]]])

    def score(s):
        out = np.zeros(len(s))
        out[1] = 1.0
        out[-1] = 1.0
        return out

    rng = np.random.default_rng(0)
    dist, _ = cem_optimize(score, cfg, 2, rng, extra_candidates=extra)
    sample = np.clip(np.random.default_rng(0).standard_normal((3, 1, 2)), -1, 1)[1]
    np.testing.assert_allclose(dist.mean, sample)


def test_std_is_floored_and_actions_clamped():
    cfg = CemConfig(horizon=2, population=64, elites=8, iterations=10, min_std=0.1)
    seen = []

    def score(s):
        seen.append(s)
        return -np.sum((s - 3.0) ** 2, axis=(1, 2))

    dist, _ = cem_optimize(score, cfg, 2, np.random.default_rng(0))
    assert np.all(dist.std >= 0.1)
    assert all(np.all(np.abs(s) <= 1.0) for s in seen)
    assert np.all(dist.mean > 0.9)


def test_policy_candidates_are_appended(model):
    z = model.encode(np.ones(4))
    seqs = policy_sequences(model, z, 3, 2, 0.0, np.random.default_rng(0))
    assert seqs.shape == (3, 3, 2)
    np.testing.assert_array_equal(seqs[0, 0], model.policy_action(z))
    z1 = model.dynamics_step(z, seqs[0, 0])
    np.testing.assert_allclose(seqs[0, 1], model.policy_action(z1), rtol=1e-12)


def test_plan_is_deterministic_given_seed(model):
    cfg = CemConfig(population=64, elites=8, iterations=3)
    o = np.ones(4)
    a1, d1, _ = plan(model, cfg, o, np.random.default_rng(5), policy_noise=0.1)
    a2, d2, _ = plan(model, cfg, o, np.random.default_rng(5), policy_noise=0.1)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(d1.mean, d2.mean)
    assert np.all(np.abs(a1) <= 1)


def test_plan_resets_distribution_unless_warm_started(model):
    cfg = CemConfig(population=16, elites=4, iterations=1, warm_start=True)
    prev = np.full((6, 2), 0.9)
    rng = np.random.default_rng(0)
    _, cold, _ = plan(model, CemConfig(population=16, elites=4, iterations=1), np.ones(4), np.random.default_rng(0))
    _, warm, _ = plan(model, cfg, np.ones(4), rng, prev_mean=prev)
    assert not np.allclose(cold.mean, warm.mean)


def test_plan_distribution_standard():
    d = PlanDistribution.standard(4, 3)
    assert d.mean.shape == (5, 3) and np.all(d.mean == 0) and np.all(d.std == 1)


@pytest.mark.parametrize("bad", [dict(elites=0), dict(elites=600), dict(iterations=0), dict(min_std=0.0), dict(refit="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        CemConfig(**bad)


def test_soft_refit_recovers_optimum():
    cfg = CemConfig(horizon=0, refit="soft", temperature=50.0, policy_fraction=0.0)
    a_star = np.array([0.3, -0.6])
    action, _, _ = plan(None, cfg, None, np.random.default_rng(0), score_fn=quadratic_scorer(a_star), action_dim=2)
    assert np.max(np.abs(action - a_star)) < 0.05


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.integers(0, 1000))
def test_argmax_recovery_property(x, y, seed):
    a_star = np.array([x, y])
    cfg = CemConfig(horizon=0, policy_fraction=0.0)
    score = quadratic_scorer(a_star)
    action, _, _ = plan(None, cfg, None, np.random.default_rng(seed), score_fn=score, action_dim=2)
    assert np.max(np.abs(action - grid_argmax(score, 2))) <= 0.05


def test_argmax_recovery_suite_small():
    assert np.all(argmax_recovery_errors(5, seed=11) <= 0.05)


def test_exhaustive_search_finds_grid_optimum():
    score = lambda s: -np.sum((s - 0.5) ** 2, axis=(1, 2))
    best, seq = exhaustive_sequence_search(score, 1, 1, points=5)
    assert best == 0.0 and np.all(seq == 0.5)


def test_linear_model_and_ratio_suite():
    m = LinearLatentModel(np.random.default_rng(0))
    z = m.dynamics_step(m.z0, np.zeros(2))
    np.testing.assert_allclose(z, m.A @ m.z0)
    ratios = multistep_planning_ratios(4, seed=9)
    assert np.all(ratios >= 0.95)
