"""Tabular Q-learning with epsilon-greedy exploration.

Environments used with ``train_q_agent`` expose

* ``actions``: list of integer action ids,
* ``reset(rng) -> state`` with hashable (usually integer) states,
* ``step(action) -> (next_state, reward, terminal, truncated)``.

A truncated step ends the episode but still bootstraps from the next state;
only terminal steps use a zero continuation value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class RlHyper:
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_floor: float = 0.01
    alpha_decay: float = 1.0
    alpha_floor: float = 0.0
    # "constant": alpha follows the per-episode decay schedule;
    # "visit": alpha = 1 / n(s, a), making Q a running sample mean when gamma = 0
    alpha_mode: str = "constant"

    def __post_init__(self):
        problems = []
        if not 0.0 < self.alpha <= 1.0:
            problems.append("alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0 or not 0.0 <= self.epsilon_floor <= 1.0:
            problems.append("epsilon and epsilon_floor must lie in [0, 1]")
        if self.epsilon_floor > self.epsilon:
            problems.append("epsilon_floor must not exceed epsilon")
        if not 0.0 < self.epsilon_decay <= 1.0 or not 0.0 < self.alpha_decay <= 1.0:
            problems.append("decay factors must lie in (0, 1]")
        if self.alpha_mode not in ("constant", "visit"):
            problems.append("alpha_mode must be 'constant' or 'visit'")
        if problems:
            raise ValueError("; ".join(problems))

    def epsilon_at(self, episode: int) -> float:
        return max(self.epsilon_floor, self.epsilon * self.epsilon_decay**episode)

    def alpha_at(self, episode: int) -> float:
        return max(self.alpha_floor, self.alpha * self.alpha_decay**episode)


class QTable:
    """Sparse Q(s, a) table; entries never written read as 0."""

    def __init__(self):
        self.values: dict[tuple[Hashable, int], float] = {}
        self.visits: dict[tuple[Hashable, int], int] = {}

    def __getitem__(self, key) -> float:
        return self.values.get(key, 0.0)

    def __setitem__(self, key, value: float) -> None:
        if not math.isfinite(value):
            raise ValueError(f"non-finite Q value for {key}")
        self.values[key] = float(value)

    def __len__(self):
        return len(self.values)

    def copy(self) -> "QTable":
        q = QTable()
        q.values = dict(self.values)
        q.visits = dict(self.visits)
        return q

    def max_value(self, state, actions: Sequence[int]) -> float:
        return max(self[state, a] for a in actions)

    def greedy(self, state, actions: Sequence[int]) -> int:
        """Highest-valued action; ties go to the lowest action id."""
        best_a, best_v = None, -math.inf
        for a in sorted(actions):
            v = self[state, a]
            if v > best_v:
                best_a, best_v = a, v
        return best_a

    def policy(self, states, actions) -> dict:
        return {s: self.greedy(s, actions) for s in states}

    def to_array(self, n_states: int, n_actions: int) -> np.ndarray:
        return np.array([[self[s, a] for a in range(n_actions)] for s in range(n_states)])


@dataclass(frozen=True)
class Transition:
    state: Hashable
    action: int
    reward: float
    next_state: Hashable
    terminal: bool = False


def q_update(q: QTable, t: Transition, hp: RlHyper, actions: Sequence[int], alpha: float | None = None) -> QTable:
    """One Q-learning step on entry (s, a); returns ``q`` (updated in place)."""
    if not math.isfinite(t.reward):
        raise ValueError(f"non-finite reward {t.reward}")
    key = (t.state, t.action)
    q.visits[key] = q.visits.get(key, 0) + 1
    if alpha is None:
        alpha = 1.0 / q.visits[key] if hp.alpha_mode == "visit" else hp.alpha
    future = 0.0 if t.terminal else q.max_value(t.next_state, actions)
    q[key] = q[key] + alpha * (t.reward + hp.gamma * future - q[key])
    return q


def epsilon_greedy(q: QTable, state, actions: Sequence[int], epsilon, rng: np.random.Generator) -> int:
    """``epsilon`` is a probability or an RlHyper (its ``epsilon`` field is used)."""
    if isinstance(epsilon, RlHyper):
        epsilon = epsilon.epsilon
    if not actions:
        raise ValueError("empty action set")
    if rng.random() < epsilon:
        return actions[int(rng.integers(len(actions)))]
    return q.greedy(state, actions)


@dataclass
class QTrainResult:
    q: QTable
    returns: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)

    def csv_rows(self):
        return [(e, r, eps) for e, (r, eps) in enumerate(zip(self.returns, self.epsilons))]


def run_episode(env, q: QTable, hp: RlHyper, epsilon: float, alpha: float | None, rng: np.random.Generator,
                learn: bool = True, on_step=None) -> float:
    """Play one episode, updating ``q`` after every step when ``learn``."""
    actions = env.actions
    state = env.reset(rng)
    total = 0.0
    while True:
        action = epsilon_greedy(q, state, actions, epsilon, rng)
        next_state, reward, terminal, truncated = env.step(action)
        if not math.isfinite(reward):
            raise ValueError(f"environment returned non-finite reward {reward}")
        if learn:
            q_update(q, Transition(state, action, reward, next_state, terminal), hp, actions,
                     None if hp.alpha_mode == "visit" else alpha)
        if on_step is not None:
            on_step(state, action, reward, next_state)
        total += reward
        state = next_state
        if terminal or truncated:
            return total


def train_q_agent(env, hp: RlHyper, episodes: int, seed: int = 0, q: QTable | None = None,
                  on_step=None) -> QTrainResult:
    """Train for ``episodes`` episodes; epsilon (and alpha) decay once per episode."""
    rng = np.random.default_rng(seed)
    result = QTrainResult(q if q is not None else QTable())
    for ep in range(episodes):
        eps, alpha = hp.epsilon_at(ep), hp.alpha_at(ep)
        ret = run_episode(env, result.q, hp, eps, alpha, rng, on_step=on_step)
        result.returns.append(ret)
        result.epsilons.append(eps)
        result.alphas.append(alpha)
    return result


class TabularMDP:
    """Finite MDP with deterministic or stochastic transitions, for tests and demos.

    ``next_state[s, a]`` is either an int array (deterministic) or, when
    ``transition_probs`` is given, ignored in favour of sampling from
    ``transition_probs[s, a]``.  Rewards may carry Gaussian noise.
    """

    def __init__(self, next_state, rewards, horizon: int = 20, terminal_states=(), reward_noise: float = 0.0,
                 start_states=None, transition_probs=None):
        self.next_state = np.asarray(next_state)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.n_states, self.n_actions = self.rewards.shape
        self.actions = list(range(self.n_actions))
        self.horizon = horizon
        self.terminal_states = set(terminal_states)
        self.reward_noise = reward_noise
        self.start_states = list(range(self.n_states)) if start_states is None else list(start_states)
        self.transition_probs = None if transition_probs is None else np.asarray(transition_probs)
        self._rng = None
        self._state = None
        self._t = 0

    def reset(self, rng):
        self._rng = rng
        choices = [s for s in self.start_states if s not in self.terminal_states]
        self._state = choices[int(rng.integers(len(choices)))]
        self._t = 0
        return self._state

    def step(self, action):
        s = self._state
        r = self.rewards[s, action]
        if self.reward_noise:
            r = r + self.reward_noise * self._rng.normal()
        if self.transition_probs is not None:
            nxt = int(self._rng.choice(self.n_states, p=self.transition_probs[s, action]))
        else:
            nxt = int(self.next_state[s, action])
        self._state = nxt
        self._t += 1
        terminal = nxt in self.terminal_states
        return nxt, float(r), terminal, (not terminal and self._t >= self.horizon)
