import json

import numpy as np
import pytest

from ccem.trainer import METRIC_COLUMNS, ReplayBuffer, Trainer, run_many, run_one


def fill(buf, n, T=4, d=1, a=1):
    for e in range(n):
        obs = np.full((T + 1, d), float(e))
        obs[:, 0] += np.arange(T + 1) / 100
        buf.add_episode(obs, np.full((T, a), float(e)), np.full(T, float(e)))


def test_buffer_slices_never_cross_episodes():
    buf = ReplayBuffer(capacity=40, episode_decisions=4, obs_dim=1, action_dim=1)
    fill(buf, 6)
    obs, act, rew = buf.sample(200, 3, np.random.default_rng(0))
    assert obs.shape == (4, 200, 1) and act.shape == (3, 200, 1) and rew.shape == (3, 200)
    ep = np.floor(obs[..., 0])
    assert np.all(ep == ep[0])
    np.testing.assert_array_equal(act[..., 0], np.broadcast_to(ep[0], (3, 200)))
    np.testing.assert_allclose(np.diff(obs[..., 0], axis=0), 0.01)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=12, episode_decisions=4, obs_dim=1, action_dim=1)
    fill(buf, 5)
    assert len(buf) == 12 and buf.episodes_added == 5
    _, _, rew = buf.sample(500, 1, np.random.default_rng(0))
    assert set(np.unique(rew)) == {2.0, 3.0, 4.0}


def test_buffer_rejects_long_slices():
    buf = ReplayBuffer(capacity=12, episode_decisions=4, obs_dim=1, action_dim=1)
    with pytest.raises(ValueError):
        buf.sample(2, 1, np.random.default_rng(0))
    fill(buf, 1)
    with pytest.raises(ValueError):
        buf.sample(2, 5, np.random.default_rng(0))


def test_warmup_is_uniform_and_buffer_grows(tiny_cfg):
    tr = Trainer(tiny_cfg, 0)
    stats = tr.collect_episode()
    assert stats.seeded and len(tr.buffer) == 20 and tr.env_step == 40
    assert np.all(np.abs(stats.actions) <= 1.0)
    acts = [tr.collect_episode().actions for _ in range(1)]
    assert len(tr.buffer) == 40
    # uniform draws from the act stream are reproducible
    rng = np.random.default_rng(np.random.SeedSequence(0).spawn(5)[1])
    np.testing.assert_array_equal(stats.actions, rng.uniform(-1, 1, (20, 2)))
    assert acts[0].shape == (20, 2)


def test_stored_returns_match_env(tiny_cfg):
    tr = Trainer(tiny_cfg, 3)
    stats = tr.collect_episode()
    assert tr.buffer.rewards[0].sum() == stats.episode_return
    from ccem.envs import make_env

    env = make_env("pointmass-sparse", episode_length=40, action_repeat=2)
    env.reset(seed=3 * 1_000_003)
    total = sum(env.step(a).r_e for a in stats.actions)
    assert total == stats.episode_return


def ready_trainer(cfg, seed=0):
    tr = Trainer(cfg, seed)
    while not tr.ready():
        tr.collect_episode()
    return tr


def test_update_losses_finite_and_grads_nonzero(tiny_cfg):
    tr = ready_trainer(tiny_cfg)
    rec = tr.update()
    for k in ("loss_q", "loss_reward", "loss_consistency", "loss_policy", "loss_inverse", "loss_contrastive"):
        assert np.isfinite(rec[k]), k
    for k in ("grad_norm_model", "grad_norm_inverse", "grad_norm_contrastive"):
        assert rec[k] > 0, k
    assert tr.update_count == 1


def test_non_ccem_intrinsic_is_bit_zero(tiny_cfg):
    tr = ready_trainer(tiny_cfg.variant("non_ccem"))
    seen = []
    import ccem.trainer as trainer_mod

    orig = trainer_mod.told_objective

    def spy(model, obs, actions, r_e, r_i, weights):
        seen.append(r_i.copy())
        return orig(model, obs, actions, r_e, r_i, weights)

    trainer_mod.told_objective = spy
    try:
        tr.update()
    finally:
        trainer_mod.told_objective = orig
    assert seen[0].tobytes() == np.zeros_like(seen[0]).tobytes()


def test_non_contrastive_leaves_contrastive_params(tiny_cfg):
    tr = ready_trainer(tiny_cfg.variant("non_contrastive"))
    p = tr.model.params
    mask = p.mask(("action_encoder", "contrastive"))
    before = p.values[mask].copy()
    rec = tr.update()
    np.testing.assert_array_equal(p.values[mask], before)
    assert "loss_contrastive" not in rec


def test_full_variant_moves_contrastive_params(tiny_cfg):
    tr = ready_trainer(tiny_cfg)
    p = tr.model.params
    before = p["contrastive.W"].copy()
    tr.update()
    assert not np.array_equal(p["contrastive.W"], before)


def test_target_q_updates_every_second_step(tiny_cfg):
    tr = ready_trainer(tiny_cfg)
    p = tr.model.params
    snap = lambda prefix: p.values[p.mask((prefix,))].copy()
    q0, e0 = snap("target_q"), snap("target_encoder")
    tr.update()  # update_count 1: encoder only
    assert np.array_equal(snap("target_q"), q0) and not np.array_equal(snap("target_encoder"), e0)
    tr.update()  # update_count 2: both
    assert not np.array_equal(snap("target_q"), q0)


def test_eval_leaves_buffer_and_params(tiny_cfg):
    tr = ready_trainer(tiny_cfg)
    tr.update()
    params, buf = tr.model.params.values.copy(), tr.buffer.obs.copy()
    n, step = len(tr.buffer), tr.env_step
    mean, returns = tr.evaluate()
    np.testing.assert_array_equal(tr.model.params.values, params)
    np.testing.assert_array_equal(tr.buffer.obs, buf)
    assert len(tr.buffer) == n and tr.env_step == step
    assert len(returns) == 2 and mean == pytest.approx(np.mean(returns))
    assert tr.evaluate() == (mean, returns)


def test_policy_noise_schedule(tiny_cfg):
    tr = Trainer(tiny_cfg.override({"train.policy_noise_decay_steps": 100}), 0)
    t = tr.cfg.train
    assert tr.policy_noise() == t.policy_noise_start
    tr.env_step = t.seed_steps + 50
    assert tr.policy_noise() == pytest.approx((t.policy_noise_start + t.policy_noise_end) / 2)
    tr.env_step = 10**6
    assert tr.policy_noise() == t.policy_noise_end


def test_train_writes_outputs(tiny_cfg, tmp_path):
    summary, text = run_one(tiny_cfg, 0, tmp_path)
    lines = text.splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    events = [ln.split(",")[1] for ln in lines[1:]]
    assert events.count("train") == 5 and events.count("eval") == 2
    assert summary.eval_steps == [120, 200] and summary.env_steps == 200
    assert summary.final_eval_return == summary.eval_returns[-1]
    assert (tmp_path / "metrics.csv").read_text() == text
    assert json.loads((tmp_path / "summary.json").read_text())["seed"] == 0
    assert (tmp_path / "resolved_config.json").exists()
    assert any((tmp_path / "checkpoints").iterdir())


def test_identical_seed_gives_identical_csv(tiny_cfg):
    _, a = run_one(tiny_cfg, 4)
    _, b = run_one(tiny_cfg, 4)
    _, c = run_one(tiny_cfg, 5)
    assert a == b and a != c


def test_run_many_workers_match_serial(tiny_cfg):
    serial = run_many(tiny_cfg, [0, 1], workers=1)
    parallel = run_many(tiny_cfg, [0, 1], workers=2)
    assert [csv for _, csv in serial] == [csv for _, csv in parallel]


def test_update_before_ready_raises(tiny_cfg):
    with pytest.raises(RuntimeError):
        Trainer(tiny_cfg, 0).update()
