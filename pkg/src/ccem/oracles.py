"""Independent checks used by ``oracle-check``, ``plan-bench`` and the tests.

Gradient oracles evaluate each loss with forward passes only and compare
central differences against the hand-written backward passes. Losses with
stop-gradients are differentiated as the surrogate the optimizer actually
follows: stopped quantities (TD targets, target-encoder embeddings, the Q
network inside the policy term) are computed once from the unperturbed
parameters and held fixed.

Planning oracles are exhaustive grid searches.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ccem.curiosity import inverse_loss, inverse_objective, temporal_contrastive_loss
from ccem.nn_core import FiniteDiffReport, finite_diff_check
from ccem.told_model import (
    LossWeights,
    ModelConfig,
    WorldModel,
    _cat,
    consistency_loss,
    policy_loss,
    q_loss,
    reward_loss,
    told_objective,
)

GRADIENT_LOSSES = ("inverse", "q", "policy", "reward", "consistency", "told", "inverse_sum", "contrastive")


def small_model(rng: np.random.Generator, twin_q: bool = False) -> WorldModel:
    cfg = ModelConfig(
        obs_dim=4,
        action_dim=2,
        latent_dim=5,
        hidden_dims=(8, 8),
        inverse_hidden_dims=(8, 8),
        action_hidden_dims=(8,),
        action_latent_dim=4,
        twin_q=twin_q,
    )
    model = WorldModel(cfg, rng)
    # Offset targets from online params so stop-gradients are actually exercised.
    model.params.values += 0.1 * rng.standard_normal(model.params.size)
    return model


@dataclass
class GradientInstance:
    model: WorldModel
    obs: np.ndarray  # (K+1, B, obs_dim)
    actions: np.ndarray  # (K, B, action_dim)
    r_e: np.ndarray
    r_i: np.ndarray
    z: np.ndarray  # (B, latent_dim) free latent input
    weights: LossWeights


def random_instance(seed: int, K: int = 3, B: int = 5, twin_q: bool = False) -> GradientInstance:
    rng = np.random.default_rng(seed)
    model = small_model(rng, twin_q)
    cfg = model.cfg
    return GradientInstance(
        model=model,
        obs=rng.standard_normal((K + 1, B, cfg.obs_dim)),
        actions=rng.uniform(-1, 1, (K, B, cfg.action_dim)),
        r_e=rng.standard_normal((K, B)),
        r_i=rng.uniform(0, 0.5, (K, B)),
        z=rng.standard_normal((B, cfg.latent_dim)),
        weights=LossWeights(lam=0.5, c1=0.1, c2=0.5, c3=2.0, gamma=float(rng.uniform(0.5, 0.99))),
    )


def _with(model: WorldModel, values: np.ndarray) -> WorldModel:
    out = model.copy()
    out.params.values[:] = values
    return out


def told_surrogate(base: WorldModel, values, obs, actions, r_e, r_i, weights: LossWeights) -> float:
    """Forward-only TOLD objective with every stopped quantity frozen at ``base``."""
    m = _with(base, values)
    K, B = actions.shape[:2]
    next_obs = obs[1:].reshape(K * B, -1)
    z_next = base.encode(next_obs)
    boot = base.predict_q(z_next, base.policy_action(z_next), use_target=True)
    td = (r_e.reshape(-1) + r_i.reshape(-1) + weights.gamma * boot).reshape(K, B)
    cons = base.encode(next_obs, target=True).reshape(K, B, -1)
    # Policy term: latents and Q from base, policy from the perturbed params.
    mixed = base.copy()
    for name in base.params.names("policy"):
        mixed.params[name] = m.params[name]
    z_base = base.encode(obs[0])
    z = m.encode(obs[0])
    total = 0.0
    for j in range(K):
        za = _cat(z, actions[j])
        lq = sum(np.mean((m.forward(h, za)[:, 0] - td[j]) ** 2) for h in m.q_heads)
        lr = np.mean((m.predict_reward(z, actions[j]) - r_e[j]) ** 2)
        z1 = m.dynamics_step(z, actions[j])
        lc = np.sum((z1 - cons[j]) ** 2) / B
        lp = -np.mean(mixed.predict_q(z_base, mixed.policy_action(z_base)))
        total += weights.lam**j * (weights.c1 * lq + weights.c2 * lr + weights.c3 * lc + lp)
        z = z1
        z_base = base.dynamics_step(z_base, actions[j])
    return float(total)


def _indices_excluding(model: WorldModel, prefixes) -> np.ndarray:
    return np.flatnonzero(~model.params.mask(prefixes))


def _sample_coords(model: WorldModel, candidates, per_segment: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``per_segment`` random coordinates from every segment, restricted to ``candidates``."""
    allowed = np.zeros(model.params.size, dtype=bool)
    allowed[candidates] = True
    picks = []
    for name in model.params.names():
        sl = model.params.segment_slice(name)
        pool = np.flatnonzero(allowed[sl]) + sl.start
        if pool.size:
            picks.append(rng.choice(pool, size=min(per_segment, pool.size), replace=False))
    return np.sort(np.concatenate(picks))


def gradient_check(
    name: str,
    inst: GradientInstance,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    per_segment: int | None = 3,
    seed: int = 0,
) -> FiniteDiffReport:
    """Finite-difference check of one named loss on one random instance.

    ``per_segment`` coordinates are perturbed in every parameter segment
    (``None`` perturbs all of them).
    """
    m, w = inst.model, inst.weights
    targets = m.target_prefixes
    o0, o1, a0 = inst.obs[0], inst.obs[1], inst.actions[0]
    z = inst.z
    if name == "inverse":
        fn = lambda v: (lambda r: (r[0], r[1].values))(inverse_loss(_with(m, v), o0, o1, a0))
        idx = None
    elif name == "inverse_sum":
        fn = lambda v: (lambda r: (r[0], r[1].values))(inverse_objective(_with(m, v), inst.obs, inst.actions))
        idx = None
    elif name == "q":
        fn = lambda v: (lambda r: (r[0], r[1].values))(
            q_loss(_with(m, v), z, a0, inst.r_e[0], inst.r_i[0], m.encode(o1), w.gamma)
        )
        # the policy and target nets only enter the constant TD target
        idx = _indices_excluding(m, targets + ("policy",))
    elif name == "policy":
        fn = lambda v: (lambda r: (r[0], r[1].values))(policy_loss(_with(m, v), z))
        idx = _indices_excluding(m, targets + m.q_heads)
    elif name == "reward":
        fn = lambda v: (lambda r: (r[0], r[1].values))(reward_loss(_with(m, v), z, a0, inst.r_e[0]))
        idx = None
    elif name == "consistency":
        fn = lambda v: (lambda r: (r[0], r[1].values))(consistency_loss(_with(m, v), z, a0, o1))
        idx = _indices_excluding(m, ("target_encoder",))
    elif name == "told":

        def fn(v):
            _, g = told_objective(_with(m, v), inst.obs, inst.actions, inst.r_e, inst.r_i, w)
            return told_surrogate(m, v, inst.obs, inst.actions, inst.r_e, inst.r_i, w), g.values

        idx = None
    elif name == "contrastive":
        fn = lambda v: (lambda r: (r[0], r[1].values))(temporal_contrastive_loss(_with(m, v), o0, a0, o1))
        idx = _indices_excluding(m, ("target_encoder",))
    else:
        raise KeyError(f"unknown loss {name!r}")
    if idx is None:
        idx = np.arange(m.params.size)
    if per_segment is not None:
        idx = _sample_coords(m, idx, per_segment, np.random.default_rng(seed))
    return finite_diff_check(fn, m.params.values, tolerance=tolerance, step=step, indices=idx)


def gradient_suite(
    n_instances: int = 20, seed: int = 0, tolerance: float = 1e-4, per_segment: int | None = 3
) -> dict[str, list[FiniteDiffReport]]:
    out: dict[str, list[FiniteDiffReport]] = {name: [] for name in GRADIENT_LOSSES}
    for i in range(n_instances):
        inst = random_instance(seed + i, twin_q=bool(i % 4 == 3))
        for name in GRADIENT_LOSSES:
            out[name].append(gradient_check(name, inst, tolerance, per_segment=per_segment, seed=seed + i))
    return out


def stop_gradient_suite(n_trials: int = 20, seed: int = 0) -> dict[str, bool]:
    """Exact-zero checks on gradient segments that must not be trained."""
    ok = {"targets_all_losses": True, "policy_only": True, "td_target": True, "inverse_scope": True, "contrastive_scope": True}
    for i in range(n_trials):
        inst = random_instance(seed + i, twin_q=bool(i % 4 == 3))
        m, w = inst.model, inst.weights
        o0, o1, a0 = inst.obs[0], inst.obs[1], inst.actions[0]
        grads = {
            "inverse": inverse_loss(m, o0, o1, a0)[1],
            "q": q_loss(m, inst.z, a0, inst.r_e[0], inst.r_i[0], m.encode(o1), w.gamma)[1],
            "policy": policy_loss(m, inst.z)[1],
            "reward": reward_loss(m, inst.z, a0, inst.r_e[0])[1],
            "consistency": consistency_loss(m, inst.z, a0, o1)[1],
            "told": told_objective(m, inst.obs, inst.actions, inst.r_e, inst.r_i, w)[1],
            "inverse_sum": inverse_objective(m, inst.obs, inst.actions)[1],
            "contrastive": temporal_contrastive_loss(m, o0, a0, o1)[1],
        }
        for g in grads.values():
            ok["targets_all_losses"] &= not np.any(g.values[g.mask(m.target_prefixes)])
        gp = grads["policy"]
        ok["policy_only"] &= not np.any(gp.values[~gp.mask(("policy",))])
        # TD target: only the Q heads may receive gradient from the Q loss
        gq = grads["q"]
        ok["td_target"] &= not np.any(gq.values[~gq.mask(m.q_heads)])
        for key, allowed in (("inverse_sum", ("inverse", "encoder")), ("contrastive", ("action_encoder", "encoder", "contrastive"))):
            g = grads[key]
            ok[key.split("_")[0] + "_scope"] &= not np.any(g.values[~g.mask(allowed)])
    return ok


# -- planning oracles -----------------------------------------------------------


def grid_argmax(score_fn, action_dim: int, points: int = 101, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Argmax of ``score_fn`` over a regular grid on ``[low, high]^action_dim`` (H = 0)."""
    axis = np.linspace(low, high, points)
    grid = np.stack(np.meshgrid(*([axis] * action_dim), indexing="ij"), axis=-1).reshape(-1, action_dim)
    scores = score_fn(grid[:, None, :])
    return grid[int(np.argmax(scores))]


def exhaustive_sequence_search(score_fn, horizon: int, action_dim: int, points: int = 5):
    """Best action sequence over a ``points``-per-dimension grid of every step."""
    axis = np.linspace(-1.0, 1.0, points)
    n_dims = (horizon + 1) * action_dim
    best_score, best_seq = -np.inf, None
    combos = np.array(list(itertools.product(axis, repeat=n_dims)))
    for chunk in np.array_split(combos, max(1, len(combos) // 4096)):
        seqs = chunk.reshape(-1, horizon + 1, action_dim)
        scores = score_fn(seqs)
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score, best_seq = float(scores[i]), seqs[i]
    return best_score, best_seq


def quadratic_scorer(a_star):
    """``score(a) = -||a - a*||^2`` on the first action of each sequence."""
    a_star = np.asarray(a_star, dtype=float)
    return lambda seqs: -np.sum((np.asarray(seqs)[:, 0] - a_star) ** 2, axis=-1)


def argmax_recovery_errors(n_trials: int = 20, seed: int = 0, cfg=None) -> np.ndarray:
    """L-infinity distance between the planner's action and the grid argmax
    on random quadratic scorers with H = 0 and two action dims."""
    from ccem.planner import CemConfig, plan

    cfg = cfg or CemConfig(horizon=0, policy_fraction=0.0)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_trials):
        score = quadratic_scorer(rng.uniform(-0.9, 0.9, 2))
        best = grid_argmax(score, 2, points=101)
        action, _, _ = plan(None, cfg, None, rng, score_fn=score, action_dim=2)
        errors.append(float(np.max(np.abs(action - best))))
    return np.array(errors)


class LinearLatentModel:
    """Toy latent model: identity encoder, ``z' = A z + B a`` and reward
    ``exp(-||z - goal||^2)``, which is positive so score ratios are meaningful.

    It exposes the planner's model interface; Q is the reward itself.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int = 2, action_dim: int = 2):
        self.A = np.eye(latent_dim) + 0.1 * rng.standard_normal((latent_dim, latent_dim))
        self.B = 0.5 * rng.standard_normal((latent_dim, action_dim)) + 0.5 * np.eye(latent_dim, action_dim)
        self.goal = rng.uniform(-1.0, 1.0, latent_dim)
        self.z0 = rng.uniform(-1.0, 1.0, latent_dim)
        self.action_dim = action_dim

    def encode(self, obs, target: bool = False):
        return np.asarray(obs, dtype=float)

    def dynamics_step(self, z, a):
        return z @ self.A.T + np.asarray(a) @ self.B.T

    def predict_reward(self, z, a):
        return np.exp(-np.sum((np.asarray(z) - self.goal) ** 2, axis=-1))

    def predict_q(self, z, a, use_target: bool = False):
        return self.predict_reward(z, a)

    def policy_action(self, z, noise_std: float = 0.0, rng=None):
        z = np.atleast_2d(z)
        a = np.zeros((z.shape[0], self.action_dim))
        if noise_std > 0:
            a = a + noise_std * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)


def multistep_planning_ratios(n_trials: int = 20, seed: int = 0, horizon: int = 2, cfg=None) -> np.ndarray:
    """Planner score over the exhaustive 5-point-grid optimum on toy linear models."""
    from ccem.planner import CemConfig, Scoring, plan, score_sequence, score_sequences

    cfg = cfg or CemConfig(horizon=horizon, policy_fraction=0.0, scoring=Scoring.SUM_REWARDS)
    ratios = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, i])
        model = LinearLatentModel(rng)
        best, _ = exhaustive_sequence_search(
            lambda s: score_sequences(model, model.z0, s, cfg), cfg.horizon, model.action_dim, points=5
        )
        _, dist, _ = plan(model, cfg, model.z0, rng)
        got = score_sequence(model, model.z0, np.clip(dist.mean, -1.0, 1.0), cfg)
        ratios.append(got / best)
    return np.array(ratios)


def scoring_gaps(n_trials: int = 5, seed: int = 0, points: int = 101) -> dict[str, list[float]]:
    """Grid-oracle score minus planner score, per scoring rule, on random small
    world models with H = 0 (the planner's action is scored like the grid)."""
    from ccem.planner import CemConfig, Scoring, plan, score_sequences

    out: dict[str, list[float]] = {s.value: [] for s in Scoring}
    for i in range(n_trials):
        rng = np.random.default_rng([seed, i])
        model = small_model(rng)
        obs = rng.standard_normal(model.cfg.obs_dim)
        z0 = model.encode(obs)
        for scoring in Scoring:
            cfg = CemConfig(horizon=0, scoring=scoring)
            fn = lambda s: score_sequences(model, z0, s, cfg)
            best = fn(grid_argmax(fn, model.action_dim, points)[None, None])[0]
            action, _, _ = plan(model, cfg, obs, rng, policy_noise=0.0)
            out[scoring.value].append(float(best - fn(action[None, None])[0]))
    return out
