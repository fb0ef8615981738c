"""Tabular Q-learning and PPO."""

from .ppo import (PpoAgent, PpoLoss, PpoParams, PpoTrajectory, compute_advantages, discounted_returns,
                  policy_log_probs, ppo_loss, ppo_update, value_of)
from .qlearning import (QTable, QTrainResult, RlHyper, TabularMDP, Transition, epsilon_greedy, q_update,
                        run_episode, train_q_agent)

__all__ = [
    "PpoAgent", "PpoLoss", "PpoParams", "PpoTrajectory", "compute_advantages", "discounted_returns",
    "policy_log_probs", "ppo_loss", "ppo_update", "value_of",
    "QTable", "QTrainResult", "RlHyper", "TabularMDP", "Transition", "epsilon_greedy", "q_update",
    "run_episode", "train_q_agent",
]
