"""Low-dimensional continuous-control tasks.

``pointmass-sparse``
    A point mass in the box [-1, 1]^2 pushed by a 2-D force. Observation
    ``(x, y, vx, vy)``. Reward 1 per unit step while the mass is within 0.1
    of a fixed goal the agent cannot see, else 0. The start sits in the
    opposite corner, so undirected dithering rarely finds the goal.

``pendulum-dense``
    Torque-limited pendulum starting near the bottom. Observation
    ``(cos th, sin th, th_dot)`` with ``th = 0`` upright. Reward
    ``(1 + cos th) / 2`` per unit step.

``step`` repeats an action ``action_repeat`` times and sums the rewards.
Episodes last ``episode_length`` unit steps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["EnvSpec", "PendulumDense", "PointMassSparse", "RewardType", "Transition", "augment", "make_env"]


class RewardType(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    episode_length: int = 1000
    action_repeat: int = 1
    reward_type: RewardType = RewardType.DENSE

    def __post_init__(self):
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        if self.episode_length % self.action_repeat:
            raise ValueError(
                f"episode_length {self.episode_length} is not divisible by action_repeat {self.action_repeat}"
            )

    @property
    def decisions_per_episode(self) -> int:
        return self.episode_length // self.action_repeat


@dataclass
class Transition:
    o: np.ndarray
    a: np.ndarray
    r_e: float
    o_next: np.ndarray
    done: bool


class _Env:
    spec: EnvSpec

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.clamp_count = 0
        self.t = 0
        self._state = None

    def reset(self, seed: int) -> np.ndarray:
        self.t = 0
        self._state = self._initial_state(np.random.default_rng(seed))
        return self._obs()

    def step(self, a) -> Transition:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.spec.episode_length:
            raise RuntimeError("episode is over; call reset()")
        a = np.asarray(a, dtype=float)
        if a.shape != (self.spec.action_dim,):
            raise ValueError(f"action has shape {a.shape}, expected ({self.spec.action_dim},)")
        if np.any(np.abs(a) > 1.0) or not np.all(np.isfinite(a)):
            self.clamp_count += 1
            a = np.clip(np.nan_to_num(a), -1.0, 1.0)
        o = self._obs()
        total = 0.0
        for _ in range(self.spec.action_repeat):
            total += self.unit_step(a)
        done = self.t >= self.spec.episode_length
        return Transition(o, a, total, self._obs(), done)

    def unit_step(self, a: np.ndarray) -> float:
        """Advance one raw environment step; returns that step's reward."""
        r = self._advance(a)
        self.t += 1
        return r

    # subclass hooks
    def _initial_state(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, a) -> float:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError


class PointMassSparse(_Env):
    DT = 0.1
    FRICTION = 0.85
    FORCE = 0.6
    GOAL = np.array([0.55, 0.75])
    GOAL_RADIUS = 0.1
    START = np.array([-0.7, -0.7])

    def __init__(self, spec: EnvSpec | None = None, **kwargs):
        spec = spec or EnvSpec("pointmass-sparse", 4, 2, reward_type=RewardType.SPARSE, action_repeat=2)
        super().__init__(replace(spec, **kwargs) if kwargs else spec)

    def _initial_state(self, rng):
        pos = self.START + rng.uniform(-0.05, 0.05, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def _advance(self, a):
        pos, vel = self._state[:2], self._state[2:]
        vel = self.FRICTION * vel + self.FORCE * self.DT * a
        pos = pos + self.DT * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        self._state = np.concatenate([pos, vel])
        return self.reward(pos)

    def reward(self, pos) -> float:
        return 1.0 if np.linalg.norm(np.asarray(pos) - self.GOAL) < self.GOAL_RADIUS else 0.0

    def _obs(self):
        return self._state.copy()

    @property
    def position(self) -> np.ndarray:
        return self._state[:2].copy()


class PendulumDense(_Env):
    DT = 0.05
    GRAVITY = 9.81
    DAMPING = 0.1
    MAX_TORQUE = 4.0
    MAX_SPEED = 8.0

    def __init__(self, spec: EnvSpec | None = None, **kwargs):
        spec = spec or EnvSpec("pendulum-dense", 3, 1, reward_type=RewardType.DENSE, action_repeat=2)
        super().__init__(replace(spec, **kwargs) if kwargs else spec)

    def _initial_state(self, rng):
        return np.array([math.pi + rng.uniform(-0.1, 0.1), 0.0])

    def set_state(self, theta: float, theta_dot: float) -> np.ndarray:
        self._state = np.array([theta, theta_dot], dtype=float)
        return self._obs()

    def _advance(self, a):
        th, thd = self._state
        # th = 0 is upright, so gravity pushes away from it
        acc = self.GRAVITY * math.sin(th) - self.DAMPING * thd + self.MAX_TORQUE * float(a[0])
        thd = float(np.clip(thd + self.DT * acc, -self.MAX_SPEED, self.MAX_SPEED))
        th = th + self.DT * thd
        th = (th + math.pi) % (2 * math.pi) - math.pi
        self._state = np.array([th, thd])
        return 0.5 * (1.0 + math.cos(th))

    def _obs(self):
        th, thd = self._state
        return np.array([math.cos(th), math.sin(th), thd])


ENVS = {"pointmass-sparse": PointMassSparse, "pendulum-dense": PendulumDense}


def make_env(name: str, **overrides) -> _Env:
    """Build an environment by name; keyword overrides replace EnvSpec fields."""
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**overrides)


def augment(observation, noise_std: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Additive Gaussian observation noise; ``noise_std = 0`` returns the input unchanged."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    observation = np.asarray(observation, dtype=float)
    if noise_std == 0:
        return observation
    return observation + noise_std * rng.standard_normal(observation.shape)
