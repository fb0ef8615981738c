"""Combined GAT + PPO training over a feature-allocation environment.

The environment holds per-column multiplicative factors ("allocation") on
the node inputs.  An action picks one column and one factor from
``FACTORS``; the column's factor is multiplied and clipped to
``ALLOC_BOUNDS``.  The raw reward of a state is the negative masked
training loss of the current GAT on the scaled features, z-scored within
the episode.

Per epoch the combined loop
  1. trains the GAT once on ``base * allocation``,
  2. plays one PPO episode starting from that allocation,
  3. runs one PPO update on the episode,
  4. keeps the lowest-loss allocation seen in the episode if it beats the
     current one under the freshly trained GAT.
With PPO disabled the allocation stays at ones and the loop is exactly
plain GAT training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gnn.model import GNNModel, ModelSpec
from .gnn.train import Trainer, accuracy, masked_cross_entropy, train_node_classifier
from .rl.ppo import PpoAgent, PpoTrajectory
from .workload import NodeTask

FACTORS = (0.5, 1.0, 2.0)
ALLOC_BOUNDS = (0.5, 2.0)
DEFAULT_HORIZON = 16
DEFAULT_EPOCHS = 1000
SMOOTH_WINDOW = 10


class RewardNormalizer:
    """Running mean/std (Welford) of an episode's raw rewards."""

    def __init__(self, guard: float = 1e-8):
        self.guard = guard
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.raw: list[float] = []

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n else 0.0

    def push(self, x: float) -> float:
        """Add ``x``; return its z-score under the statistics including it."""
        if not math.isfinite(x):
            raise ValueError(f"non-finite raw reward {x}")
        self.raw.append(float(x))
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)
        return self.z(x)

    def z(self, x: float) -> float:
        std = self.std
        return (x - self.mean) / std if std >= self.guard else 0.0

    def episode_z(self) -> list[float]:
        """Every raw reward of the episode z-scored with the final statistics."""
        return [self.z(x) for x in self.raw]


class EthereumOptimizationEnv:
    def __init__(self, task: NodeTask, horizon: int = DEFAULT_HORIZON, allocation=None,
                 factors=FACTORS, bounds=ALLOC_BOUNDS):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.task = task
        self.base = task.x.copy()
        self.base.setflags(write=False)
        self.train_mask = task.train_mask
        self.test_mask = task.test_mask
        self.horizon = horizon
        self.factors = tuple(factors)
        self.bounds = bounds
        self.start = np.ones(self.n_columns) if allocation is None else np.asarray(allocation, dtype=np.float64)
        self.normalizer = RewardNormalizer()
        self.reset()

    @property
    def n_columns(self) -> int:
        return self.base.shape[1]

    @property
    def n_actions(self) -> int:
        return self.n_columns * len(self.factors)

    @property
    def obs_dim(self) -> int:
        return self.n_columns + 1

    def reset(self) -> np.ndarray:
        self.allocation = self.start.copy()
        self.t = 0
        self.normalizer.reset()
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.append(np.log2(self.allocation), self.t / self.horizon)

    def decode(self, action: int) -> tuple[int, float]:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range [0, {self.n_actions})")
        return action // len(self.factors), self.factors[action % len(self.factors)]

    def features(self, allocation=None) -> np.ndarray:
        return self.base * (self.allocation if allocation is None else allocation)

    def apply_resource_allocation(self, action: int) -> np.ndarray:
        col, factor = self.decode(action)
        lo, hi = self.bounds
        self.allocation[col] = min(max(self.allocation[col] * factor, lo), hi)
        return self.features()

    def raw_reward(self, model: GNNModel, features: np.ndarray, epoch: int = 0) -> float:
        logits = model.forward(self.task.adj, features, epoch=epoch)
        loss = float(masked_cross_entropy(logits, self.task.labels, self.train_mask))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite GAT loss in reward")
        return -loss

    def calculate_reward(self, model: GNNModel, features: np.ndarray, epoch: int = 0) -> tuple[float, float]:
        """(raw reward, running z-score within the episode)."""
        raw = self.raw_reward(model, features, epoch)
        return raw, self.normalizer.push(raw)

    def step(self, action: int, model: GNNModel, epoch: int = 0):
        """Returns (observation, normalized reward, raw reward, done)."""
        feats = self.apply_resource_allocation(action)
        raw, norm = self.calculate_reward(model, feats, epoch)
        self.t += 1
        return self.observation(), norm, raw, self.t >= self.horizon


@dataclass
class CombinedTrace:
    gat_loss: list = field(default_factory=list)
    ppo_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    ppo_value_loss: list = field(default_factory=list)
    ppo_entropy: list = field(default_factory=list)

    def __len__(self):
        return len(self.gat_loss)

    def csv_rows(self):
        return [(e, g, p) for e, (g, p) in enumerate(zip(self.gat_loss, self.ppo_loss))]

    def ppo_rows(self):
        return [(e, p, v, h) for e, (p, v, h) in enumerate(zip(self.ppo_loss, self.ppo_value_loss, self.ppo_entropy))]


@dataclass
class CombinedResult:
    trace: CombinedTrace
    model: GNNModel
    agent: PpoAgent | None
    allocation: np.ndarray
    test_accuracy: float


def play_episode(env: EthereumOptimizationEnv, agent: PpoAgent, model: GNNModel, epoch: int = 0):
    """One PPO episode; returns (trajectory with episode-level z-scored rewards, best allocation, its raw reward)."""
    traj = PpoTrajectory()
    obs = env.reset()
    best_alloc, best_raw = None, -math.inf
    done = False
    while not done:
        a, logp, v = agent.act(obs)
        nxt, _, raw, done = env.step(a, model, epoch)
        traj.add(obs, a, logp, v, 0.0)
        if raw > best_raw:
            best_alloc, best_raw = env.allocation.copy(), raw
        obs = nxt
    traj.rewards = env.normalizer.episode_z()
    return traj, best_alloc, best_raw


def train_combined(task: NodeTask, gat_spec: ModelSpec, num_epochs: int = DEFAULT_EPOCHS, seed: int = 0, *,
                   lr: float = 0.01, ppo: bool = True, horizon: int = DEFAULT_HORIZON, ppo_lr: float = 3e-4,
                   ppo_hidden: int = 32, gamma: float = 0.99) -> CombinedResult:
    model = GNNModel.init(gat_spec, seed)
    trainer = Trainer(model, task.adj, task.labels, task.train_mask, task.test_mask, lr=lr)
    allocation = np.ones(task.in_dim)
    agent = None
    if ppo:
        probe = EthereumOptimizationEnv(task, horizon)
        agent = PpoAgent(probe.obs_dim, probe.n_actions, hidden=ppo_hidden, lr=ppo_lr, gamma=gamma, seed=seed + 1)
    trace = CombinedTrace()
    for _ in range(num_epochs):
        x = task.x * allocation if ppo else task.x
        loss, acc = trainer.step(x)
        trace.gat_loss.append(loss)
        trace.test_accuracy.append(acc)
        if not ppo:
            trace.ppo_loss.append(0.0)
            trace.ppo_value_loss.append(0.0)
            trace.ppo_entropy.append(0.0)
            continue
        env = EthereumOptimizationEnv(task, horizon, allocation=allocation)
        current = env.raw_reward(model, env.features(), trainer.epoch)
        traj, best_alloc, best_raw = play_episode(env, agent, model, trainer.epoch)
        stats = agent.update(traj)
        trace.ppo_loss.append(stats.total)
        trace.ppo_value_loss.append(stats.value)
        trace.ppo_entropy.append(stats.entropy)
        if best_raw > current:
            allocation = best_alloc
    x = task.x * allocation if ppo else task.x
    logits = model.forward(task.adj, x, epoch=trainer.epoch)
    return CombinedResult(trace, model, agent, allocation, accuracy(logits, task.labels, task.test_mask))


def smoothed(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average over full windows."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v[:0] if v.size == 0 else np.array([v.mean()])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


@dataclass
class Comparison:
    gat_loss: list
    gatrl_loss: list
    ppo_loss: list
    gat_accuracy: float
    gatrl_accuracy: float

    def final_smoothed(self, window: int = SMOOTH_WINDOW) -> tuple[float, float]:
        g, r = smoothed(self.gat_loss, window), smoothed(self.gatrl_loss, window)
        return (float(g[-1]) if g.size else math.nan), (float(r[-1]) if r.size else math.nan)

    def csv_rows(self):
        return [(e, g, r, p) for e, (g, r, p) in enumerate(zip(self.gat_loss, self.gatrl_loss, self.ppo_loss))]

    def summary(self) -> dict:
        g, r = self.final_smoothed()
        return {"epochs": len(self.gat_loss), "gat_test_accuracy": self.gat_accuracy,
                "gatrl_test_accuracy": self.gatrl_accuracy, "gat_final_smoothed_loss": g,
                "gatrl_final_smoothed_loss": r}


def compare_gat_vs_gatrl(task: NodeTask, gat_spec: ModelSpec, epochs: int, seed: int = 0, **kw) -> Comparison:
    """Plain GAT and combined GAT-RL from the same initialization and budget."""
    plain = train_node_classifier(gat_spec, task.adj, task.x, task.labels, task.train_mask, task.test_mask,
                                  epochs=epochs, lr=kw.get("lr", 0.01), seed=seed)
    combined = train_combined(task, gat_spec, epochs, seed, **kw)
    return Comparison(plain.losses, combined.trace.gat_loss, combined.trace.ppo_loss, plain.test_accuracy,
                      combined.test_accuracy)
