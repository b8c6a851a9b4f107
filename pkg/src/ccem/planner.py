"""Cross-entropy method planning in latent space.

Action sequences ``a_0..a_H`` are scored by rolling the latent dynamics
forward from the encoded observation. Four scoring rules are available:

* ``sum_rewards``: ``sum_t gamma^t R(z_t, a_t)`` for t = 0..H
* ``rewards_plus_terminal``: ``sum_{t<H} gamma^t R(z_t, a_t) + gamma^H Q(z_H, a_H)``
* ``value_sum``: ``sum_t gamma^t Q(z_t, a_t)`` for t = 0..H
* ``curiosity_value_sum``: the same formula as ``value_sum``; the difference
  lies entirely in training, where Q regresses onto extrinsic plus intrinsic
  reward.

The model is duck-typed: anything with ``encode``, ``dynamics_step``,
``predict_reward``, ``predict_q`` and ``policy_action`` can be planned with.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CemConfig",
    "DegenerateModelError",
    "PlanDistribution",
    "Scoring",
    "cem_optimize",
    "plan",
    "score_sequence",
    "score_sequences",
]


class DegenerateModelError(RuntimeError):
    """Every candidate sequence scored non-finite."""


class Scoring(str, enum.Enum):
    SUM_REWARDS = "sum_rewards"
    REWARDS_PLUS_TERMINAL = "rewards_plus_terminal"
    VALUE_SUM = "value_sum"
    CURIOSITY_VALUE_SUM = "curiosity_value_sum"


@dataclass(frozen=True)
class CemConfig:
    horizon: int = 5
    population: int = 512
    elites: int = 64
    iterations: int = 6
    gamma: float = 0.99
    policy_fraction: float = 0.05
    min_std: float = 0.05
    scoring: Scoring = Scoring.CURIOSITY_VALUE_SUM
    refit: str = "hard"  # "hard" top-k mean/std, or "soft" score-weighted
    temperature: float = 0.5  # only used by the soft refit
    warm_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scoring", Scoring(self.scoring))
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError(f"need 1 <= elites <= population, got {self.elites} and {self.population}")
        if not 0.0 <= self.policy_fraction <= 1.0:
            raise ValueError("policy_fraction must lie in [0, 1]")
        if self.min_std <= 0:
            raise ValueError("min_std must be positive")
        if self.refit not in ("hard", "soft"):
            raise ValueError(f"unknown refit {self.refit!r}")

    @property
    def n_policy(self) -> int:
        return int(round(self.population * self.policy_fraction))


@dataclass
class PlanDistribution:
    mean: np.ndarray  # (H+1, action_dim)
    std: np.ndarray

    @classmethod
    def standard(cls, horizon: int, action_dim: int) -> PlanDistribution:
        return cls(np.zeros((horizon + 1, action_dim)), np.ones((horizon + 1, action_dim)))


@dataclass
class PlanDiagnostics:
    elite_mean: list[float] = field(default_factory=list)
    elite_max: list[float] = field(default_factory=list)

    @property
    def final_elite_mean(self) -> float:
        return self.elite_mean[-1] if self.elite_mean else float("nan")


def score_sequences(model, z0, actions, cfg: CemConfig) -> np.ndarray:
    """Score a batch of sequences ``actions`` of shape ``(N, H+1, action_dim)``.

    Non-finite scores are replaced by ``-inf``.
    """
    actions = np.asarray(actions, dtype=float)
    n, steps, _ = actions.shape
    z = np.broadcast_to(np.asarray(z0, dtype=float), (n, np.shape(z0)[-1]))
    score = np.zeros(n)
    last = steps - 1
    with np.errstate(all="ignore"):
        for t in range(steps):
            a = actions[:, t]
            disc = cfg.gamma**t
            if cfg.scoring is Scoring.SUM_REWARDS:
                score += disc * model.predict_reward(z, a)
            elif cfg.scoring is Scoring.REWARDS_PLUS_TERMINAL:
                score += disc * (model.predict_q(z, a) if t == last else model.predict_reward(z, a))
            else:
                score += disc * model.predict_q(z, a)
            if t < last:
                z = model.dynamics_step(z, a)
    score[~np.isfinite(score)] = -np.inf
    return score


def score_sequence(model, z0, seq, cfg: CemConfig) -> float:
    return float(score_sequences(model, z0, np.asarray(seq)[None], cfg)[0])


def policy_sequences(model, z0, n: int, horizon: int, noise_std: float, rng) -> np.ndarray:
    """``n`` sequences from rolling the policy through the latent dynamics."""
    z = np.broadcast_to(np.asarray(z0, dtype=float), (n, np.shape(z0)[-1]))
    out = []
    for t in range(horizon + 1):
        a = model.policy_action(z, noise_std, rng)
        out.append(a)
        if t < horizon:
            z = model.dynamics_step(z, a)
    return np.stack(out, axis=1)


def _refit(elites: np.ndarray, elite_scores: np.ndarray, cfg: CemConfig):
    if cfg.refit == "hard":
        return elites.mean(axis=0), elites.std(axis=0)
    w = np.exp(cfg.temperature * (elite_scores - elite_scores.max()))
    w /= w.sum()
    mean = np.tensordot(w, elites, axes=1)
    std = np.sqrt(np.tensordot(w, (elites - mean) ** 2, axes=1))
    return mean, std


def cem_optimize(
    score_fn: Callable[[np.ndarray], np.ndarray],
    cfg: CemConfig,
    action_dim: int,
    rng: np.random.Generator,
    init: PlanDistribution | None = None,
    extra_candidates: np.ndarray | None = None,
):
    """Maximize ``score_fn`` over clamped action sequences with the CEM.

    Sampled candidates come first and ``extra_candidates`` (e.g. policy
    rollouts) last; ties between equal scores go to the lower index.
    Returns ``(dist, diagnostics)``.
    """
    H = cfg.horizon
    dist = init or PlanDistribution.standard(H, action_dim)
    mean, std = dist.mean.copy(), dist.std.copy()
    n_extra = 0 if extra_candidates is None else len(extra_candidates)
    n_sample = cfg.population - n_extra
    if n_sample < 0:
        raise ValueError("more extra candidates than the population size")
    diag = PlanDiagnostics()
    for _ in range(cfg.iterations):
        eps = rng.standard_normal((n_sample, H + 1, action_dim))
        cands = np.clip(mean + std * eps, -1.0, 1.0)
        if n_extra:
            cands = np.concatenate([cands, extra_candidates])
        scores = np.asarray(score_fn(cands), dtype=float)
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        if not np.any(np.isfinite(scores)):
            raise DegenerateModelError("degenerate model: every candidate scored non-finite")
        order = np.argsort(-scores, kind="stable")[: cfg.elites]
        elite_scores = scores[order]
        finite = np.isfinite(elite_scores)
        elites, elite_scores = cands[order][finite], elite_scores[finite]
        mean, std = _refit(elites, elite_scores, cfg)
        std = np.maximum(std, cfg.min_std)
        diag.elite_mean.append(float(elite_scores.mean()))
        diag.elite_max.append(float(elite_scores.max()))
    return PlanDistribution(mean, std), diag


def plan(
    model,
    cfg: CemConfig,
    observation,
    rng: np.random.Generator,
    prev_mean: np.ndarray | None = None,
    policy_noise: float | None = None,
    score_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    action_dim: int | None = None,
):
    """Choose an action for ``observation``.

    The sampling distribution restarts at zero mean and unit std unless
    ``cfg.warm_start`` is set and ``prev_mean`` is given, in which case the
    previous mean is shifted one step forward. ``policy_noise`` is the
    exploration std of the policy rollouts (defaults to ``cfg.min_std``).
    ``score_fn`` overrides model scoring, e.g. with a synthetic objective.
    Returns ``(action, dist, diagnostics)``.
    """
    if action_dim is None:
        action_dim = model.action_dim
    H = cfg.horizon
    init = PlanDistribution.standard(H, action_dim)
    if cfg.warm_start and prev_mean is not None:
        init.mean[:-1] = np.asarray(prev_mean)[1:]
    extra = None
    if score_fn is None:
        z0 = model.encode(np.asarray(observation, dtype=float))
        score_fn = lambda seqs: score_sequences(model, z0, seqs, cfg)
        if cfg.n_policy:
            noise = cfg.min_std if policy_noise is None else policy_noise
            extra = policy_sequences(model, z0, cfg.n_policy, H, noise, rng)
    dist, diag = cem_optimize(score_fn, cfg, action_dim, rng, init, extra)
    action = np.clip(dist.mean[0], -1.0, 1.0)
    return action, dist, diag
