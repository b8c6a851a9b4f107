"""Curiosity terms: inverse dynamics, intrinsic reward and temporal InfoNCE.

The forward model of the curiosity module is the TOLD latent dynamics
itself, so the intrinsic reward needs no parameters of its own. Intrinsic
rewards are only ever computed from replayed transitions, where the true
next observation is known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ccem.nn_core import ShapeError
from ccem.told_model import WorldModel, _cat

__all__ = [
    "IntrinsicState",
    "encode_action",
    "info_nce",
    "intrinsic_reward",
    "inverse_loss",
    "inverse_objective",
    "temporal_contrastive_loss",
]


@dataclass
class IntrinsicState:
    """Intrinsic weight, decay rate and the running reward maxima used to normalize.

    Both maxima hold a placeholder of 1.0 until the first strictly positive
    observation replaces it; from then on they are running maxima of what
    has been observed.
    """

    C: float = 0.3
    alpha: float = 1e-5
    r_e_max: float = 1.0
    r_i_max: float = 1.0
    r_e_seen: bool = False
    r_i_seen: bool = False

    def __post_init__(self):
        if self.C < 0 or self.alpha < 0:
            raise ValueError("intrinsic weight and decay must be non-negative")

    def observe_extrinsic(self, rewards) -> None:
        rewards = np.abs(np.asarray(rewards, dtype=float))
        if rewards.size:
            self.r_e_max, self.r_e_seen = _running_max(self.r_e_max, self.r_e_seen, float(rewards.max()))

    def observe_intrinsic(self, errors) -> None:
        errors = np.asarray(errors, dtype=float)
        if errors.size:
            self.r_i_max, self.r_i_seen = _running_max(self.r_i_max, self.r_i_seen, float(errors.max()))

    def decay(self, env_step: float) -> float:
        if env_step < 0:
            raise ValueError("env_step must be non-negative")
        return self.C * math.exp(-self.alpha * env_step)


def _running_max(current: float, seen: bool, value: float):
    if not value > 0:
        return current, seen
    return (max(current, value) if seen else value), True


def encode_action(model: WorldModel, a) -> np.ndarray:
    """Layer-normalized action features ``u = g(a)``."""
    return model.encode_action(a)


def intrinsic_reward(model: WorldModel, state: IntrinsicState, z_t, a_t, z_next, env_step, update_max=True):
    """``C * exp(-alpha * E) * ||d(z_t, a_t) - z_next||^2 * r_e_max / r_i_max``.

    ``z_next`` is the encoding of the observed next observation. With
    ``update_max`` the running maximum of the raw prediction error is updated
    from this batch before normalizing. The result is a constant for every
    downstream loss.
    """
    z_hat = model.dynamics_step(z_t, a_t)
    err = np.sum((z_hat - np.asarray(z_next)) ** 2, axis=-1)
    if update_max:
        state.observe_intrinsic(err)
    return state.decay(env_step) * err * (state.r_e_max / state.r_i_max)


def inverse_loss(model: WorldModel, o_t, o_next, a_t):
    """Mean over the batch of ``||I(h(o_t), h(o_next)) - a_t||^2``.

    Both observations go through the online encoder; gradients reach only
    the inverse model and the online encoder. Returns ``(loss, param_grad)``.
    """
    o_t = np.asarray(o_t, dtype=model.params.dtype)
    if o_t.ndim == 1:
        return inverse_objective(model, np.stack([o_t, o_next])[:, None], np.asarray(a_t)[None, None])
    return inverse_objective(model, np.stack([o_t, o_next]), np.asarray(a_t)[None])


def inverse_objective(model: WorldModel, obs, actions):
    """Sum over the K steps of a trajectory batch of the single-step inverse loss."""
    obs = np.asarray(obs, dtype=model.params.dtype)
    actions = np.asarray(actions, dtype=model.params.dtype)
    K, B = actions.shape[:2]
    if obs.shape[:2] != (K + 1, B):
        raise ShapeError(f"observations {obs.shape[:2]} do not match actions {(K, B)}")
    dz = model.cfg.latent_dim
    grad = model.params.zeros_like()
    z, enc_cache = model.forward_cached("encoder", obs.reshape((K + 1) * B, -1))
    z = z.reshape(K + 1, B, dz)
    pairs = np.concatenate([z[:-1], z[1:]], axis=-1).reshape(K * B, 2 * dz)
    a_hat, inv_cache = model.forward_cached("inverse", pairs)
    err = a_hat - actions.reshape(K * B, -1)
    loss = float(np.sum(err**2) / B)
    d_pairs = model.backward("inverse", inv_cache, 2.0 / B * err, grad).reshape(K, B, 2 * dz)
    d_z = np.zeros_like(z)
    d_z[:-1] += d_pairs[..., :dz]
    d_z[1:] += d_pairs[..., dz:]
    model.backward("encoder", enc_cache, d_z.reshape((K + 1) * B, dz), grad)
    return loss, grad


def info_nce(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of each row against its diagonal entry.

    Returns ``(loss, d_logits)``.
    """
    logits = np.asarray(logits, dtype=float)
    n = logits.shape[0]
    if n < 2 or logits.shape != (n, n):
        raise ValueError(f"InfoNCE needs a square logit matrix with N >= 2, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -float(np.mean(np.diag(log_p)))
    d_logits = np.exp(log_p)
    d_logits[np.diag_indices(n)] -= 1.0
    return loss, d_logits / n


def temporal_contrastive_loss(model: WorldModel, o_t, a_t, o_next, scale: float = 1.0):
    """InfoNCE between queries ``[h(o_t), g(a_t)]`` and keys ``h_target(o_next)``.

    Logits are the bilinear products ``q_n^T W k_m``; the other rows of the
    batch supply the negative keys. Gradients reach the online encoder, the
    action encoder and ``W`` (multiplied by ``scale``), never the target
    encoder. Returns ``(loss, param_grad)`` with the unscaled loss.
    """
    o_t = np.asarray(o_t, dtype=model.params.dtype)
    if o_t.ndim != 2 or o_t.shape[0] < 2:
        raise ValueError("temporal contrastive loss needs a batch of at least 2 transitions")
    dz = model.cfg.latent_dim
    grad = model.params.zeros_like()
    z, enc_cache = model.forward_cached("encoder", o_t)
    u, act_cache = model.forward_cached("action_encoder", model._check_action(a_t))
    keys = model.encode(o_next, target=True)
    query = _cat(z, u)
    W = model.params["contrastive.W"]
    qW = query @ W
    loss, d_logits = info_nce(qW @ keys.T)
    d_logits *= scale
    d_qW = d_logits @ keys
    grad["contrastive.W"] += query.T @ d_qW
    d_query = d_qW @ W.T
    model.backward("encoder", enc_cache, d_query[:, :dz], grad)
    model.backward("action_encoder", act_cache, d_query[:, dz:], grad)
    return loss, grad
