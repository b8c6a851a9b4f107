"""Task-oriented latent dynamics (TOLD) model and its training losses.

One :class:`WorldModel` owns every learnable map of the agent in a single
:class:`~ccem.nn_core.ParamVector`:

============================  ===========================================
segment prefix                role
============================  ===========================================
``encoder``                   online encoder h(o) -> z
``dynamics``                  latent dynamics d(z, a) -> z'
``reward``                    extrinsic reward head R(z, a)
``q`` (``q2`` if twin)        state-action value Q(z, a)
``policy``                    tanh policy pi(z)
``target_encoder``            EMA copy of ``encoder``
``target_q`` (``target_q2``)  EMA copy of ``q``
``inverse``                   inverse dynamics I(z, z') -> a   (curiosity)
``action_encoder``            action features g(a) -> u        (curiosity)
``contrastive.W``             bilinear contrastive matrix      (curiosity)
============================  ===========================================

Batched tensors are laid out time-major: observations ``(K+1, B, obs_dim)``,
actions ``(K, B, action_dim)`` and rewards ``(K, B)``. Single-step losses
average over the batch and sum squared errors over feature dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ccem.nn_core import (
    Activation,
    MlpSpec,
    NonFiniteError,
    ParamVector,
    ShapeError,
    init_mlp,
    load_params,
    mlp_backward_cached,
    mlp_forward,
    mlp_forward_cached,
    mlp_layout,
    save_params,
)

__all__ = [
    "LossWeights",
    "ModelConfig",
    "WorldModel",
    "consistency_loss",
    "policy_loss",
    "q_loss",
    "reward_loss",
    "told_objective",
]


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    action_dim: int
    latent_dim: int = 50
    hidden_dims: tuple[int, ...] = (256, 256)
    inverse_hidden_dims: tuple[int, ...] = (512, 512)
    action_hidden_dims: tuple[int, ...] = (512,)
    action_latent_dim: int = 16
    activation: str = "elu"
    twin_q: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("hidden_dims", "inverse_hidden_dims", "action_hidden_dims"):
            object.__setattr__(self, name, tuple(int(h) for h in getattr(self, name)))


@dataclass(frozen=True)
class LossWeights:
    """Temporal weight ``lam`` and coefficients of the Q, reward and consistency terms."""

    lam: float = 0.5
    c1: float = 0.1
    c2: float = 0.5
    c3: float = 2.0
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam must lie in (0, 1], got {self.lam}")
        if min(self.c1, self.c2, self.c3) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")


THETA = ("encoder", "dynamics", "reward", "q", "q2", "policy")
TARGETS = ("target_encoder", "target_q", "target_q2")


def _cat(z, a):
    return np.concatenate([z, a], axis=-1)


class WorldModel:
    """Parameter container plus inference-time maps of the latent model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        act = Activation(cfg.activation)
        dz, da, du = cfg.latent_dim, cfg.action_dim, cfg.action_latent_dim
        h = cfg.hidden_dims
        self.q_heads = ("q", "q2") if cfg.twin_q else ("q",)
        self.specs: dict[str, MlpSpec] = {
            "encoder": MlpSpec(cfg.obs_dim, h, dz, act),
            "dynamics": MlpSpec(dz + da, h, dz, act),
            "reward": MlpSpec(dz + da, h, 1, act),
            "policy": MlpSpec(dz, h, da, act, output_activation=Activation.TANH),
            "inverse": MlpSpec(2 * dz, cfg.inverse_hidden_dims, da, act),
            "action_encoder": MlpSpec(da, cfg.action_hidden_dims, du, act, output_layernorm=True),
        }
        for name in self.q_heads:
            self.specs[name] = MlpSpec(dz + da, h, 1, act)
        self.specs["target_encoder"] = self.specs["encoder"]
        for name in self.q_heads:
            self.specs["target_" + name] = self.specs[name]

        layout = []
        for name in self.specs:
            layout += mlp_layout(self.specs[name], name)
        layout.append(("contrastive.W", (dz + du, dz)))
        self.params = ParamVector(layout, dtype=np.dtype(cfg.dtype))
        for name, spec in self.specs.items():
            if not name.startswith("target_"):
                init_mlp(spec, self.params, name, rng)
        bound = 1.0 / np.sqrt(dz + du)
        self.params["contrastive.W"] = rng.uniform(-bound, bound, size=(dz + du, dz))
        self.sync_targets()

    @property
    def action_dim(self) -> int:
        return self.cfg.action_dim

    # -- parameter groups -------------------------------------------------
    @property
    def theta_prefixes(self) -> tuple[str, ...]:
        return tuple(p for p in THETA if p in self.specs)

    @property
    def target_prefixes(self) -> tuple[str, ...]:
        return tuple(p for p in TARGETS if p in self.specs)

    def target_pairs(self, which: str = "all") -> list[tuple[str, str]]:
        """(target segment, online segment) name pairs for EMA updates."""
        sources = {"encoder": ["encoder"], "q": list(self.q_heads)}
        sources["all"] = sources["encoder"] + sources["q"]
        pairs = []
        for online in sources[which]:
            for name in self.params.names(online):
                pairs.append(("target_" + name, name))
        return pairs

    def sync_targets(self) -> None:
        for tgt, src in self.target_pairs():
            self.params[tgt] = self.params[src]

    def copy(self) -> WorldModel:
        other = object.__new__(WorldModel)
        other.cfg, other.specs, other.q_heads = self.cfg, self.specs, self.q_heads
        other.params = self.params.copy()
        return other

    def save(self, path):
        return save_params(self.params, path)

    @classmethod
    def load(cls, cfg: ModelConfig, path) -> WorldModel:
        model = cls(cfg)
        loaded = load_params(path, dtype=model.params.dtype)
        if loaded.layout != model.params.layout:
            raise ShapeError(f"checkpoint {path} does not match the model layout")
        model.params = loaded
        return model

    # -- forward maps -----------------------------------------------------
    def forward(self, name: str, x) -> np.ndarray:
        return mlp_forward(self.specs[name], self.params, x, name)

    def forward_cached(self, name: str, x):
        return mlp_forward_cached(self.specs[name], self.params, x, name)

    def backward(self, name: str, cache, out_grad, grad: ParamVector | None) -> np.ndarray:
        return mlp_backward_cached(self.specs[name], self.params, cache, out_grad, name, grad)

    def _check_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=self.params.dtype)
        if a.shape[-1] != self.cfg.action_dim:
            raise ShapeError(f"action has shape {a.shape}, expected (..., {self.cfg.action_dim})")
        return a

    def _check_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=self.params.dtype)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"latent has shape {z.shape}, expected (..., {self.cfg.latent_dim})")
        return z

    def encode(self, obs, target: bool = False) -> np.ndarray:
        return self.forward("target_encoder" if target else "encoder", obs)

    def dynamics_step(self, z, a) -> np.ndarray:
        return self.forward("dynamics", _cat(self._check_latent(z), self._check_action(a)))

    def predict_reward(self, z, a):
        return self.forward("reward", _cat(self._check_latent(z), self._check_action(a)))[..., 0]

    def predict_q(self, z, a, use_target: bool = False):
        za = _cat(self._check_latent(z), self._check_action(a))
        prefix = "target_" if use_target else ""
        qs = [self.forward(prefix + name, za)[..., 0] for name in self.q_heads]
        return qs[0] if len(qs) == 1 else np.minimum(*qs)

    def policy_action(self, z, noise_std: float = 0.0, rng: np.random.Generator | None = None):
        """tanh policy output; Gaussian noise is added before clamping to [-1, 1]."""
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        a = self.forward("policy", self._check_latent(z))
        if noise_std > 0:
            if rng is None:
                raise ValueError("policy noise requires an rng")
            a = np.clip(a + noise_std * rng.standard_normal(a.shape), -1.0, 1.0)
        return a

    def encode_action(self, a) -> np.ndarray:
        return self.forward("action_encoder", self._check_action(a))


# -- single-step losses ------------------------------------------------------


def _as_batch(x, model: WorldModel):
    x = np.asarray(x, dtype=model.params.dtype)
    return x[None] if x.ndim == 1 else x


def _as_rows(x, model: WorldModel, n: int):
    x = np.asarray(x, dtype=model.params.dtype)
    return np.broadcast_to(x.reshape(-1), (n,)) if x.size in (1, n) else x


def _td_target(model: WorldModel, z_next, r_e, r_i, gamma: float) -> np.ndarray:
    bootstrap = model.predict_q(z_next, model.policy_action(z_next), use_target=True)
    target = r_e + r_i + gamma * bootstrap
    if not np.all(np.isfinite(target)):
        raise NonFiniteError("non-finite TD target")
    return target


def _q_regression(model: WorldModel, za, target, scale, grad):
    """Sum over Q heads of ``scale * mean((Q(za) - target)^2)``; returns (loss, d_za)."""
    n = za.shape[0]
    loss = 0.0
    d_za = np.zeros_like(za)
    for name in model.q_heads:
        q, cache = model.forward_cached(name, za)
        err = q[:, 0] - target
        loss += float(np.mean(err**2))
        d_za += model.backward(name, cache, (scale * 2.0 / n * err)[:, None], grad)
    return loss, d_za


def _regression(model: WorldModel, name: str, x, target, scale, grad):
    """``scale * mean(||f(x) - target||^2)``; returns (unscaled loss, d_x)."""
    out, cache = model.forward_cached(name, x)
    err = out - target.reshape(out.shape)
    n = x.shape[0]
    loss = float(np.sum(err**2) / n)
    return loss, model.backward(name, cache, scale * 2.0 / n * err, grad)


def _policy_term(model: WorldModel, z, scale, grad) -> np.ndarray:
    """Gradient of ``-sum(scale * Q(z, pi(z)))`` routed only into the policy.

    ``scale`` may be a scalar or per-row weights. Returns the per-row Q values.
    """
    n = z.shape[0]
    a, pi_cache = model.forward_cached("policy", z)
    za = _cat(z, a)
    outs = [model.forward_cached(name, za) for name in model.q_heads]
    qs = np.stack([q[:, 0] for q, _ in outs])
    pick = np.argmin(qs, axis=0)
    q_min = qs[pick, np.arange(n)]
    d_za = np.zeros_like(za)
    for h, (name, (_, cache)) in enumerate(zip(model.q_heads, outs)):
        g = np.where(pick == h, -scale, 0.0)[:, None]
        d_za += model.backward(name, cache, g, None)
    model.backward("policy", pi_cache, d_za[:, z.shape[1]:], grad)
    return q_min


def q_loss(model: WorldModel, z_t, a_t, r_e, r_i, z_next, gamma: float = 0.99):
    """TD regression of Q(z_t, a_t) onto ``r_e + r_i + gamma * Qbar(z', pi(z'))``.

    The target is a constant: no gradient reaches the target network, the
    policy or ``z_next``. Returns ``(loss, param_grad, z_grad)``.
    """
    z_t, a_t, z_next = (_as_batch(x, model) for x in (z_t, a_t, z_next))
    n = z_t.shape[0]
    r_e, r_i = _as_rows(r_e, model, n), _as_rows(r_i, model, n)
    target = _td_target(model, z_next, r_e, r_i, gamma)
    grad = model.params.zeros_like()
    loss, d_za = _q_regression(model, _cat(z_t, a_t), target, 1.0, grad)
    return loss, grad, d_za[:, : model.cfg.latent_dim]


def reward_loss(model: WorldModel, z_t, a_t, r_e):
    """Squared error of the reward head against the extrinsic reward only."""
    z_t, a_t = _as_batch(z_t, model), _as_batch(a_t, model)
    r_e = _as_rows(r_e, model, z_t.shape[0])
    grad = model.params.zeros_like()
    loss, d_za = _regression(model, "reward", _cat(z_t, a_t), r_e, 1.0, grad)
    return loss, grad, d_za[:, : model.cfg.latent_dim]


def consistency_loss(model: WorldModel, z_t, a_t, o_next):
    """``||d(z_t, a_t) - h_target(o_next)||^2``; the target encoder gets no gradient."""
    z_t, a_t, o_next = (_as_batch(x, model) for x in (z_t, a_t, o_next))
    target = model.encode(o_next, target=True)
    grad = model.params.zeros_like()
    loss, d_za = _regression(model, "dynamics", _cat(z_t, a_t), target, 1.0, grad)
    return loss, grad, d_za[:, : model.cfg.latent_dim]


def policy_loss(model: WorldModel, z_t):
    """``-Q(z, pi(z))``; only the policy segments receive gradient."""
    z_t = _as_batch(z_t, model)
    grad = model.params.zeros_like()
    loss = -float(np.mean(_policy_term(model, z_t, 1.0 / z_t.shape[0], grad)))
    return loss, grad


# -- multi-step objective ------------------------------------------------------


@dataclass
class ToldLosses:
    total: float
    q: float = 0.0
    reward: float = 0.0
    consistency: float = 0.0
    policy: float = 0.0
    step_totals: list = field(default_factory=list)


def told_objective(model: WorldModel, obs, actions, r_e, r_i, weights: LossWeights = LossWeights()):
    """Temporally weighted TOLD loss over a K-step latent rollout.

    ``z_0 = h(o_0)`` and ``z_{j+1} = d(z_j, a_j)``; step ``j`` is weighted by
    ``lam**j``. Returns ``(ToldLosses, param_grad)``; the component fields of
    :class:`ToldLosses` hold the lam-weighted sums of each unscaled loss.
    """
    obs = np.asarray(obs, dtype=model.params.dtype)
    actions = np.asarray(actions, dtype=model.params.dtype)
    if obs.ndim == 2:
        obs, actions = obs[:, None], actions[:, None]
        r_e = np.asarray(r_e)[:, None]
        r_i = np.asarray(r_i)[:, None]
    K, B = actions.shape[:2]
    if K < 1 or obs.shape[0] != K + 1:
        raise ShapeError(f"need K+1 observations for K actions, got {obs.shape[0]} and {K}")
    r_e = np.asarray(r_e, dtype=model.params.dtype).reshape(K, B)
    r_i = np.asarray(r_i, dtype=model.params.dtype).reshape(K, B)
    dz, w = model.cfg.latent_dim, weights

    # Constant targets for all steps, computed in one batch each.
    next_obs = obs[1:].reshape(K * B, -1)
    z_next_online = model.encode(next_obs)
    td = _td_target(model, z_next_online, r_e.reshape(-1), r_i.reshape(-1), w.gamma).reshape(K, B)
    cons_target = model.encode(next_obs, target=True).reshape(K, B, dz)

    grad = model.params.zeros_like()
    z0, enc_cache = model.forward_cached("encoder", obs[0])
    zs = [z0]
    dyn_caches = []
    for j in range(K):
        z1, cache = model.forward_cached("dynamics", _cat(zs[j], actions[j]))
        zs.append(z1)
        dyn_caches.append(cache)

    lam_pow = w.lam ** np.arange(K)
    rows = np.repeat(lam_pow, B)  # per-row temporal weight
    z_stack = np.concatenate(zs[:-1])
    za = _cat(z_stack, actions.reshape(K * B, -1))

    # Batched heads: reward, Q and policy; each row scaled by lam^j / B.
    r_hat, r_cache = model.forward_cached("reward", za)
    r_err = r_hat[:, 0] - r_e.reshape(-1)
    d_za = model.backward("reward", r_cache, (w.c2 * rows * 2.0 / B * r_err)[:, None], grad)
    per_step_r = (r_err**2).reshape(K, B).mean(axis=1)

    per_step_q = np.zeros(K)
    for name in model.q_heads:
        q_hat, q_cache = model.forward_cached(name, za)
        q_err = q_hat[:, 0] - td.reshape(-1)
        d_za += model.backward(name, q_cache, (w.c1 * rows * 2.0 / B * q_err)[:, None], grad)
        per_step_q += (q_err**2).reshape(K, B).mean(axis=1)

    per_step_pi = -_policy_term(model, z_stack, rows / B, grad).reshape(K, B).mean(axis=1)

    d_z_heads = d_za[:, :dz].reshape(K, B, dz)

    # Recurrent backward through the latent rollout.
    per_step_c = np.zeros(K)
    d_z_next = np.zeros((B, dz))
    for j in range(K - 1, -1, -1):
        c_err = zs[j + 1] - cons_target[j]
        per_step_c[j] = float(np.sum(c_err**2) / B)
        g_out = w.c3 * lam_pow[j] * 2.0 / B * c_err + d_z_next
        d_in = model.backward("dynamics", dyn_caches[j], g_out, grad)
        d_z_next = d_in[:, :dz] + d_z_heads[j]
    model.backward("encoder", enc_cache, d_z_next, grad)

    step_totals = w.c1 * per_step_q + w.c2 * per_step_r + w.c3 * per_step_c + per_step_pi
    total = float(np.sum(lam_pow * step_totals))
    if not np.isfinite(total):
        bad = int(np.flatnonzero(~np.isfinite(step_totals))[0])
        raise NonFiniteError(f"non-finite TOLD loss at rollout step {bad}")
    losses = ToldLosses(
        total=total,
        q=float(lam_pow @ per_step_q),
        reward=float(lam_pow @ per_step_r),
        consistency=float(lam_pow @ per_step_c),
        policy=float(lam_pow @ per_step_pi),
        step_totals=step_totals.tolist(),
    )
    return losses, grad
