"""Replay buffer and the training loop.

Each training iteration collects one episode with the planner, then runs a
number of updates. One update samples a batch of length-k trajectories and
takes, in order: an Adam step on the TOLD objective, a step on the
inverse-dynamics objective (inverse model + online encoder), a step on the
temporal contrastive objective (action encoder + online encoder + W), and
finally the EMA updates of the target encoder and target Q.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccem.config import ExperimentConfig
from ccem.curiosity import IntrinsicState, intrinsic_reward, inverse_objective, temporal_contrastive_loss
from ccem.envs import augment, make_env
from ccem.nn_core import AdamState, NonFiniteError, adam_step, ema_update
from ccem.planner import plan
from ccem.told_model import LossWeights, ModelConfig, WorldModel, told_objective

__all__ = ["EpisodeStats", "METRIC_COLUMNS", "ReplayBuffer", "RunSummary", "Trainer", "run_many", "run_one"]

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "env_step",
    "event",
    "episode_return",
    "loss_q",
    "loss_reward",
    "loss_consistency",
    "loss_policy",
    "loss_inverse",
    "loss_contrastive",
    "intrinsic_mean",
    "elite_score_mean",
    "wall_clock_s",
)
LOSS_KEYS = METRIC_COLUMNS[3:10]


class ReplayBuffer:
    """FIFO store of whole fixed-length episodes.

    Evicting whole episodes keeps every stored trajectory intact, and slices
    are drawn within a single episode.
    """

    def __init__(self, capacity: int, episode_decisions: int, obs_dim: int, action_dim: int):
        self.T = episode_decisions
        self.max_episodes = max(1, capacity // episode_decisions)
        self.obs = np.zeros((self.max_episodes, self.T + 1, obs_dim))
        self.actions = np.zeros((self.max_episodes, self.T, action_dim))
        self.rewards = np.zeros((self.max_episodes, self.T))
        self.n_episodes = 0
        self._next = 0
        self.episodes_added = 0

    def __len__(self) -> int:
        return self.n_episodes * self.T

    def add_episode(self, obs, actions, rewards) -> None:
        obs, actions, rewards = np.asarray(obs), np.asarray(actions), np.asarray(rewards)
        if obs.shape[0] != self.T + 1 or actions.shape[0] != self.T or rewards.shape != (self.T,):
            raise ValueError(f"episode must have {self.T} transitions")
        i = self._next
        self.obs[i], self.actions[i], self.rewards[i] = obs, actions, rewards
        self._next = (i + 1) % self.max_episodes
        self.n_episodes = min(self.n_episodes + 1, self.max_episodes)
        self.episodes_added += 1

    def sample(self, batch_size: int, k: int, rng: np.random.Generator):
        """``batch_size`` length-``k`` slices: obs ``(k+1, B, d)``, actions ``(k, B, a)``, rewards ``(k, B)``."""
        if self.n_episodes == 0 or k > self.T:
            raise ValueError("buffer holds no complete trajectory of the requested length")
        ep = rng.integers(self.n_episodes, size=batch_size)
        start = rng.integers(0, self.T - k + 1, size=batch_size)
        t = start[:, None] + np.arange(k + 1)
        obs = self.obs[ep[:, None], t]
        actions = self.actions[ep[:, None], t[:, :k]]
        rewards = self.rewards[ep[:, None], t[:, :k]]
        return obs.swapaxes(0, 1), actions.swapaxes(0, 1), rewards.T


@dataclass
class EpisodeStats:
    episode_return: float
    env_steps: int
    decisions: int
    success: bool
    elite_score_mean: float = float("nan")
    seeded: bool = False
    actions: np.ndarray | None = None


@dataclass
class RunSummary:
    seed: int
    final_eval_return: float = float("nan")
    eval_returns: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    first_success_step: float | None = None
    env_steps: int = 0
    updates: int = 0


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


class Trainer:
    def __init__(self, cfg: ExperimentConfig, seed: int = 0, out_dir=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        e = cfg.env
        self.env = make_env(e.name, episode_length=e.episode_length, action_repeat=e.action_repeat)
        self.eval_env = make_env(e.name, episode_length=e.episode_length, action_repeat=e.action_repeat)
        spec = self.env.spec
        m = cfg.model
        self.model_cfg = ModelConfig(
            obs_dim=spec.obs_dim,
            action_dim=spec.action_dim,
            latent_dim=m.latent_dim,
            hidden_dims=m.hidden_dims,
            inverse_hidden_dims=m.inverse_hidden_dims,
            action_hidden_dims=m.action_hidden_dims,
            action_latent_dim=m.action_latent_dim,
            twin_q=m.twin_q,
            dtype=m.dtype,
        )
        seq = np.random.SeedSequence(self.seed)
        init_ss, act_ss, plan_ss, sample_ss, aug_ss = seq.spawn(5)
        self.model = WorldModel(self.model_cfg, np.random.default_rng(init_ss))
        self.act_rng = np.random.default_rng(act_ss)
        self.plan_rng = np.random.default_rng(plan_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.aug_rng = np.random.default_rng(aug_ss)

        t = cfg.train
        self.weights = LossWeights(lam=t.lam, c1=t.c1, c2=t.c2, c3=t.c3, gamma=t.gamma)
        self.intrinsic = IntrinsicState(C=cfg.intrinsic.C, alpha=cfg.intrinsic.alpha)
        self.buffer = ReplayBuffer(t.buffer_capacity, spec.decisions_per_episode, spec.obs_dim, spec.action_dim)
        p = self.model.params
        dtype = p.dtype
        self.opt_model = AdamState.create(p.indices(self.model.theta_prefixes), t.lr_model, dtype)
        self.opt_inverse = AdamState.create(p.indices(("inverse", "encoder")), t.lr_inverse, dtype)
        self.opt_contrastive = AdamState.create(
            p.indices(("action_encoder", "encoder", "contrastive")), t.lr_contrastive, dtype
        )
        self.env_step = 0
        self.episodes = 0
        self.update_count = 0
        self.first_success_step: int | None = None
        self.summary = RunSummary(seed=self.seed)
        self.metrics = io.StringIO()
        self._writer = csv.writer(self.metrics, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)
        self._t0 = time.perf_counter()

    # -- acting -------------------------------------------------------------
    def policy_noise(self) -> float:
        """Exploration std of policy rollouts, linearly annealed after the seed phase."""
        t = self.cfg.train
        frac = min(max(self.env_step - t.seed_steps, 0) / max(t.policy_noise_decay_steps, 1), 1.0)
        return (1.0 - frac) * t.policy_noise_start + frac * t.policy_noise_end

    def collect_episode(self) -> EpisodeStats:
        spec = self.env.spec
        obs = self.env.reset(seed=self.seed * 1_000_003 + self.episodes)
        T = spec.decisions_per_episode
        all_obs = np.zeros((T + 1, spec.obs_dim))
        actions = np.zeros((T, spec.action_dim))
        rewards = np.zeros(T)
        all_obs[0] = obs
        elite_means = []
        seeded = self.env_step < self.cfg.train.seed_steps
        for i in range(T):
            if self.env_step < self.cfg.train.seed_steps:
                a = self.act_rng.uniform(-1.0, 1.0, spec.action_dim)
            else:
                a, _, diag = plan(self.model, self.cfg.cem, obs, self.plan_rng, policy_noise=self.policy_noise())
                elite_means.append(diag.final_elite_mean)
            tr = self.env.step(a)
            self.env_step += spec.action_repeat
            if tr.r_e > 0 and self.first_success_step is None:
                self.first_success_step = self.env_step
            actions[i], rewards[i], all_obs[i + 1] = tr.a, tr.r_e, tr.o_next
            obs = tr.o_next
        self.buffer.add_episode(all_obs, actions, rewards)
        self.intrinsic.observe_extrinsic(rewards)
        self.episodes += 1
        return EpisodeStats(
            episode_return=float(rewards.sum()),
            env_steps=spec.episode_length,
            decisions=T,
            success=bool(np.any(rewards > 0)),
            elite_score_mean=float(np.mean(elite_means)) if elite_means else float("nan"),
            seeded=seeded,
            actions=actions,
        )

    # -- learning -------------------------------------------------------------
    def ready(self) -> bool:
        t = self.cfg.train
        return len(self.buffer) >= t.batch_size * (t.traj_len + 1)

    def _step(self, opt: AdamState, grad) -> float:
        g = grad.values
        norm = float(np.linalg.norm(g[opt.index]))
        clip = self.cfg.train.grad_clip_norm
        if clip > 0 and norm > clip:
            g = g * (clip / norm)
        adam_step(opt, self.model.params, g)
        return norm

    def update(self) -> dict[str, float]:
        t = self.cfg.train
        if not self.ready():
            raise RuntimeError("replay buffer is too small for an update")
        model, K = self.model, t.traj_len
        obs, actions, r_e = self.sample_batch()
        obs = augment(obs, self.cfg.env.aug_noise, self.aug_rng)
        B = obs.shape[1]
        record: dict[str, float] = {}
        try:
            if t.non_ccem:
                r_i = np.zeros((K, B))
            else:
                flat = obs.reshape((K + 1) * B, -1)
                z = model.encode(flat).reshape(K + 1, B, -1)
                z_true = model.encode(flat, target=True).reshape(K + 1, B, -1)
                r_i = intrinsic_reward(
                    model,
                    self.intrinsic,
                    z[:-1].reshape(K * B, -1),
                    actions.reshape(K * B, -1),
                    z_true[1:].reshape(K * B, -1),
                    self.env_step,
                ).reshape(K, B)
            record["intrinsic_mean"] = float(np.mean(r_i))

            losses, grad = told_objective(model, obs, actions, r_e, r_i, self.weights)
            record.update(
                loss_q=losses.q, loss_reward=losses.reward, loss_consistency=losses.consistency, loss_policy=losses.policy
            )
            record["grad_norm_model"] = self._step(self.opt_model, grad)

            loss_inv, grad = inverse_objective(model, obs, actions)
            record["loss_inverse"] = loss_inv
            record["grad_norm_inverse"] = self._step(self.opt_inverse, grad)

            if not t.non_contrastive:
                loss_c, grad = temporal_contrastive_loss(model, obs[0], actions[0], obs[1], scale=t.contrastive_coef)
                record["loss_contrastive"] = loss_c
                record["grad_norm_contrastive"] = self._step(self.opt_contrastive, grad)
        except NonFiniteError as exc:
            self._dump_failure(exc, record)
            raise
        self.update_count += 1
        self._ema()
        return record

    def sample_batch(self):
        t = self.cfg.train
        return self.buffer.sample(t.batch_size, t.traj_len, self.sample_rng)

    def _ema(self) -> None:
        t = self.cfg.train
        p = self.model.params
        groups = []
        if self.update_count % t.target_encoder_every == 0:
            groups.append("encoder")
        if self.update_count % t.target_q_every == 0:
            groups.append("q")
        for group in groups:
            for tgt, src in self.model.target_pairs(group):
                p[tgt] = ema_update(p[tgt], p[src], t.ema)

    def _dump_failure(self, exc, record) -> None:
        info = {
            "error": str(exc),
            "env_step": self.env_step,
            "update": self.update_count,
            "partial_record": record,
            "param_norms": {n: float(np.linalg.norm(self.model.params[n])) for n in self.model.params.names()},
        }
        log.error("non-finite loss at update %d: %s", self.update_count, exc)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "failure_dump.json").write_text(json.dumps(info, indent=2))

    # -- evaluation -------------------------------------------------------------
    def evaluate(self) -> tuple[float, list[float]]:
        """Mean return over ``eval_episodes`` noiseless episodes with fixed seeds."""
        returns, elite = [], []
        for i in range(self.cfg.train.eval_episodes):
            rng = np.random.default_rng([self.seed, 7919, i])
            obs = self.eval_env.reset(seed=10_000_019 + i)
            total, done = 0.0, False
            while not done:
                a, _, diag = plan(self.model, self.cfg.cem, obs, rng, policy_noise=0.0)
                elite.append(diag.final_elite_mean)
                tr = self.eval_env.step(a)
                total += tr.r_e
                obs, done = tr.o_next, tr.done
            returns.append(total)
        self._last_eval_elite = float(np.mean(elite))
        return float(np.mean(returns)), returns

    # -- main loop -----------------------------------------------------------------
    def _row(self, event: str, episode_return, record=None, elite=None) -> None:
        record = record or {}
        wall = time.perf_counter() - self._t0 if self.cfg.train.log_wall_clock else None
        self._writer.writerow(
            [_fmt(self.env_step), event, _fmt(episode_return)]
            + [_fmt(record.get(k)) for k in LOSS_KEYS]
            + [_fmt(elite), _fmt(wall)]
        )

    def train(self, progress=None) -> RunSummary:
        t = self.cfg.train
        next_eval = t.eval_every
        while self.env_step < t.total_env_steps:
            stats = self.collect_episode()
            records = []
            if self.ready():
                n = t.updates_per_episode or stats.decisions
                for _ in range(n):
                    records.append(self.update())
            mean_record = {k: float(np.mean([r[k] for r in records if k in r])) for k in LOSS_KEYS if any(k in r for r in records)}
            self._row("train", stats.episode_return, mean_record, stats.elite_score_mean)
            if self.env_step >= next_eval or self.env_step >= t.total_env_steps:
                mean_ret, _ = self.evaluate()
                self.summary.eval_returns.append(mean_ret)
                self.summary.eval_steps.append(self.env_step)
                self._row("eval", mean_ret, None, self._last_eval_elite)
                self.checkpoint()
                while next_eval <= self.env_step:
                    next_eval += t.eval_every
                if progress:
                    progress(self, mean_ret)
        self.summary.final_eval_return = self.summary.eval_returns[-1] if self.summary.eval_returns else float("nan")
        self.summary.first_success_step = self.first_success_step
        self.summary.env_steps = self.env_step
        self.summary.updates = self.update_count
        self.write_outputs()
        return self.summary

    def checkpoint(self) -> None:
        if self.out_dir is not None:
            self.model.save(self.out_dir / "checkpoints" / f"step_{self.env_step:08d}")

    def metrics_csv(self) -> str:
        return self.metrics.getvalue()

    def write_outputs(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "metrics.csv").write_text(self.metrics_csv())
        (self.out_dir / "summary.json").write_text(json.dumps(dataclasses.asdict(self.summary), indent=2) + "\n")
        self.cfg.save(self.out_dir / "resolved_config.json")


def run_one(cfg: ExperimentConfig, seed: int, out_dir=None) -> tuple[RunSummary, str]:
    """Train one seed; returns its summary and metrics CSV text."""
    trainer = Trainer(cfg, seed, out_dir)
    summary = trainer.train()
    return summary, trainer.metrics_csv()


def _run_one_star(args):
    return run_one(*args)


def run_many(cfg: ExperimentConfig, seeds, out_dir=None, workers: int = 1) -> list[tuple[RunSummary, str]]:
    """Train independent seeds, in worker processes when ``workers > 1``.

    Results come back in the order of ``seeds``. Each seed writes under
    ``out_dir/seed_<n>`` when ``out_dir`` is given.
    """
    jobs = [(cfg, int(s), None if out_dir is None else Path(out_dir) / f"seed_{int(s)}") for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [run_one(*job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one_star, jobs))
