"""MADDPG building blocks: replay buffer, agent groups, critic and actor updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import Mlp, make_optimizer, soft_update

HIDDEN = (128, 64)


@dataclass(frozen=True)
class Hyper:
    gamma: float = 0.99
    tau: float = 0.01
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch_size: int = 32
    capacity: int = 64
    noise_start: float = 0.1  # fraction of the action range
    noise_end: float = 0.01
    optimizer: str = "sgd"
    soft_convention: str = "printed"
    slope: float = 0.01
    reward_scale: float = 1.0  # multiplies rewards before they enter the buffer

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= capacity")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")


class ReplayBuffer:
    """FIFO ring of joint transitions; each field keeps its per-agent shape."""

    def __init__(self, capacity: int, shapes: dict):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.data = {k: np.zeros((capacity,) + tuple(s)) for k, s in shapes.items()}
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, **fields) -> None:
        for k, v in fields.items():
            self.data[k][self.head] = v
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_first(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.head + np.arange(self.capacity)) % self.capacity

    def sample(self, batch_size: int, rng) -> dict:
        """Uniform draw without replacement within the batch."""
        if self.size == 0:
            raise ValueError("empty replay buffer")
        if batch_size > self.size:
            raise ValueError("batch larger than buffer fill")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {k: v[idx] for k, v in self.data.items()}


@dataclass
class AgentBundle:
    """One agent's networks; views into the stacked group when taken from one."""

    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    hyper: Hyper
    buffer: ReplayBuffer | None = None


def critic_eval(critic: Mlp, global_state, global_action):
    """Q for concatenated global states and actions (last axis)."""
    x = np.concatenate([np.asarray(global_state, dtype=float), np.asarray(global_action, dtype=float)], axis=-1)
    q = critic(x)
    return q[..., 0]


def critic_step(critic: Mlp, x, y, optimizer=None):
    """One mean-squared Bellman step toward targets ``y``; returns (loss, grads) before the step.

    ``x`` is ``(*stack, B, D)`` and ``y`` ``(*stack, B)``; each stacked critic
    gets its own loss.
    """
    q, cache = critic.forward(x)
    err = q[..., 0] - y
    loss = np.mean(err**2, axis=-1)
    upstream = (2.0 / err.shape[-1]) * err[..., None]
    grads, _ = critic.backward(cache, upstream)
    if optimizer is not None:
        optimizer.step(critic.params, grads)
    return loss, grads


def bellman_targets(target_critic: Mlp, next_x, rewards, gamma: float):
    return rewards + gamma * target_critic(next_x)[..., 0]


def update_critic(bundle: AgentBundle, batch: dict, next_actions, optimizer=None):
    """Single-agent critic update on ``batch`` (keys ``s``, ``a``, ``r``, ``s2`` with flattened joint rows).

    ``next_actions`` are the target actors' joint actions on ``s2``.
    """
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    opt = optimizer or make_optimizer(bundle.hyper.optimizer, bundle.hyper.lr_critic)
    x = np.concatenate([batch["s"], batch["a"]], axis=-1)
    x2 = np.concatenate([batch["s2"], next_actions], axis=-1)
    y = bellman_targets(bundle.target_critic, x2, batch["r"], bundle.hyper.gamma)
    loss, _ = critic_step(bundle.critic, x, y, opt)
    return float(loss)


def _gather_block(arr, offsets, width):
    """Slice ``arr[..., off:off+width]`` with a per-stack offset."""
    offsets = np.asarray(offsets)
    idx = offsets[..., None, None] + np.arange(width)
    idx = np.broadcast_to(idx, arr.shape[:-1] + (width,))
    return np.take_along_axis(arr, idx, axis=-1)


def _scatter_block(arr, offsets, block):
    offsets = np.asarray(offsets)
    width = block.shape[-1]
    idx = np.broadcast_to(offsets[..., None, None] + np.arange(width), block.shape)
    out = arr.copy()
    np.put_along_axis(out, idx, block, axis=-1)
    return out


def actor_gradient(actor: Mlp, critic: Mlp, own_states, joint_x, offsets):
    """Gradient of ``-mean Q`` w.r.t. actor parameters through the critic's action input.

    ``own_states`` ``(*stack, B, s)`` feed the actor; its output replaces the
    block starting at ``offsets`` of ``joint_x`` ``(*stack, B, D)``. Returns
    (objective mean Q, actor grads).
    """
    a, a_cache = actor.forward(own_states)
    x = _scatter_block(joint_x, offsets, a)
    q, c_cache = critic.forward(x)
    B = q.shape[-2]
    _, dx = critic.backward(c_cache, np.full(q.shape, -1.0 / B))
    da = _gather_block(dx, offsets, a.shape[-1])
    grads, _ = actor.backward(a_cache, da)
    return np.mean(q[..., 0], axis=-1), grads


def update_actor(bundle: AgentBundle, own_states, joint_x, offset: int, optimizer=None):
    """Ascend Q along this agent's action block; other blocks come from ``joint_x``."""
    if len(own_states) == 0:
        raise ValueError("empty batch")
    opt = optimizer or make_optimizer(bundle.hyper.optimizer, bundle.hyper.lr_actor)
    obj, grads = actor_gradient(bundle.actor, bundle.critic, own_states, joint_x, offset)
    opt.step(bundle.actor.params, grads)
    return float(obj)


def actor_act(actor: Mlp, states, explore: bool = False, sigma: float = 0.0, rng=None):
    """Normalised actions in [-1, 1]; exploration adds Gaussian noise clipped to 2 sigma."""
    a = actor(states)
    if explore and sigma > 0:
        noise = np.clip(rng.normal(0.0, sigma, size=a.shape), -2 * sigma, 2 * sigma)
        a = a + noise
    return np.clip(a, -1.0, 1.0)


class AgentGroup:
    """M agents of one network, parameters stacked along a leading agent axis."""

    def __init__(self, n_agents: int, state_dim: int, action_dim: int, hyper: Hyper, rng):
        hyper.validate()
        self.n_agents, self.state_dim, self.action_dim, self.hyper = n_agents, state_dim, action_dim, hyper
        stack = (n_agents,)
        self.joint_dim = n_agents * (state_dim + action_dim)
        self.actor = Mlp((state_dim, *HIDDEN, action_dim), "tanh", hyper.slope, rng, stack)
        self.critic = Mlp((self.joint_dim, *HIDDEN, 1), "identity", hyper.slope, rng, stack)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = make_optimizer(hyper.optimizer, hyper.lr_actor)
        self.critic_opt = make_optimizer(hyper.optimizer, hyper.lr_critic)
        self.buffer = ReplayBuffer(hyper.capacity, {
            "s": (n_agents, state_dim), "a": (n_agents, action_dim), "r": (n_agents,),
            "s2": (n_agents, state_dim)})
        # start of agent m's action block inside the joint critic input
        self.offsets = n_agents * state_dim + np.arange(n_agents) * action_dim

    def agent(self, m: int) -> AgentBundle:
        return AgentBundle(self.actor.view(m), self.critic.view(m), self.target_actor.view(m),
                           self.target_critic.view(m), self.hyper, self.buffer)

    def act(self, states, explore: bool = False, sigma: float = 0.0, rng=None):
        """``states`` (M, s) -> normalised actions (M, a)."""
        a = actor_act(self.actor, np.asarray(states, dtype=float)[:, None, :], explore, sigma, rng)
        return a[:, 0, :]

    def update(self, rng):
        """One critic + actor step for every agent and a soft target update."""
        h = self.hyper
        batch = self.buffer.sample(h.batch_size, rng)
        B, M = h.batch_size, self.n_agents
        s, a, r, s2 = batch["s"], batch["a"], batch["r"], batch["s2"]

        next_a = self.target_actor(np.swapaxes(s2, 0, 1))  # (M, B, a)
        x2 = np.concatenate([s2.reshape(B, -1), np.swapaxes(next_a, 0, 1).reshape(B, -1)], axis=1)
        x = np.concatenate([s.reshape(B, -1), a.reshape(B, -1)], axis=1)
        xs = np.broadcast_to(x, (M,) + x.shape)
        y = bellman_targets(self.target_critic, np.broadcast_to(x2, (M,) + x2.shape), r.T, h.gamma)
        critic_loss, _ = critic_step(self.critic, xs, y, self.critic_opt)

        obj, grads = actor_gradient(self.actor, self.critic, np.swapaxes(s, 0, 1), xs, self.offsets)
        self.actor_opt.step(self.actor.params, grads)

        soft_update(self.target_actor, self.actor, h.tau, h.soft_convention)
        soft_update(self.target_critic, self.critic, h.tau, h.soft_convention)
        return critic_loss, obj

    def is_finite(self) -> bool:
        return self.actor.is_finite() and self.critic.is_finite()
