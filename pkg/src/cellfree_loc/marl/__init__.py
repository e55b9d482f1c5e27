"""Hand-written MADDPG and the joint positioning + correction trainer."""

from .agents import AgentBundle, AgentGroup, Hyper, ReplayBuffer, actor_act, critic_eval, update_actor, update_critic
from .jpc import (JpcEnv, JpcResult, TrainConfig, TrainingLog, position_from_action, random_action_rmse,
                  reward_correction, reward_positioning, train_jpc)
from .mlp import Adam, Mlp, Sgd, mlp_forward, mlp_gradient, soft_update

__all__ = [
    "Adam", "AgentBundle", "AgentGroup", "Hyper", "JpcEnv", "JpcResult", "Mlp", "ReplayBuffer", "Sgd",
    "TrainConfig", "TrainingLog", "actor_act", "critic_eval", "mlp_forward", "mlp_gradient",
    "position_from_action", "random_action_rmse", "reward_correction", "reward_positioning",
    "soft_update", "train_jpc", "update_actor", "update_critic",
]
