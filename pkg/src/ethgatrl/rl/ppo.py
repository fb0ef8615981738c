"""Minimal PPO with a clipped surrogate, value baseline and entropy bonus.

Both networks are two-layer tanh perceptrons with hand-written backward
passes.  Advantages are returns minus the value baseline (no GAE).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..optim import Adam


def mlp_init(d_in: int, hidden: int, d_out: int, rng: np.random.Generator, out_scale: float = 1.0) -> dict:
    lim1 = math.sqrt(6.0 / (d_in + hidden))
    lim2 = math.sqrt(6.0 / (hidden + d_out)) * out_scale
    return {
        "w1": rng.uniform(-lim1, lim1, size=(d_in, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.uniform(-lim2, lim2, size=(hidden, d_out)),
        "b2": np.zeros(d_out),
    }


def mlp_forward(p: dict, x: np.ndarray):
    h = np.tanh(x @ p["w1"] + p["b1"])
    return h @ p["w2"] + p["b2"], h


def mlp_backward(p: dict, x: np.ndarray, h: np.ndarray, dout: np.ndarray) -> dict:
    da = (dout @ p["w2"].T) * (1.0 - h * h)
    return {"w1": x.T @ da, "b1": da.sum(axis=0), "w2": h.T @ dout, "b2": dout.sum(axis=0)}


MLP_KEYS = ("w1", "b1", "w2", "b2")


@dataclass
class PpoParams:
    policy: dict
    value: dict
    clip: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    update_epochs: int = 4

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip ratio must lie in (0, 1)")
        if self.update_epochs < 1:
            raise ValueError("update_epochs must be >= 1")

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, hidden: int = 32, seed: int = 0, **kw) -> "PpoParams":
        rng = np.random.default_rng(seed)
        # small output layer keeps the initial policy close to uniform
        return cls(mlp_init(obs_dim, hidden, n_actions, rng, out_scale=0.01), mlp_init(obs_dim, hidden, 1, rng), **kw)

    def arrays(self) -> list:
        return [self.policy[k] for k in MLP_KEYS] + [self.value[k] for k in MLP_KEYS]

    def copy(self) -> "PpoParams":
        return replace(self, policy={k: v.copy() for k, v in self.policy.items()},
                       value={k: v.copy() for k, v in self.value.items()})

    @property
    def n_actions(self) -> int:
        return self.policy["w2"].shape[1]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_log_probs(params: PpoParams, obs) -> np.ndarray:
    logits, _ = mlp_forward(params.policy, np.atleast_2d(np.asarray(obs, dtype=np.float64)))
    return log_softmax(logits)


def value_of(params: PpoParams, obs) -> np.ndarray:
    v, _ = mlp_forward(params.value, np.atleast_2d(np.asarray(obs, dtype=np.float64)))
    return v[:, 0]


@dataclass
class PpoTrajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    returns: list | None = None
    advantages: list | None = None

    def __len__(self):
        return len(self.actions)

    def add(self, state, action, log_prob, value, reward) -> None:
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))

    def check(self) -> None:
        n = len(self.actions)
        lens = [len(self.states), len(self.log_probs), len(self.values), len(self.rewards)]
        if self.advantages is not None:
            lens += [len(self.advantages), len(self.returns)]
        if any(k != n for k in lens):
            raise ValueError("trajectory fields have unequal lengths")
        if self.advantages is not None and not np.all(np.isfinite(self.advantages)):
            raise ValueError("non-finite advantages")


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def compute_advantages(traj: PpoTrajectory, gamma: float, std_guard: float = 1e-8) -> PpoTrajectory:
    """Fill ``returns`` and standardized ``advantages`` (returns minus values)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    returns = discounted_returns(traj.rewards, gamma)
    adv = returns - np.asarray(traj.values, dtype=np.float64)
    if not np.all(np.isfinite(adv)):
        raise ValueError("non-finite advantages")
    adv = adv - adv.mean()
    std = adv.std()
    if std >= std_guard:
        adv = adv / std
    out = replace(traj, returns=returns.tolist(), advantages=adv.tolist())
    out.check()
    return out


@dataclass(frozen=True)
class PpoLoss:
    total: float
    policy: float
    value: float
    entropy: float


def ppo_loss(params: PpoParams, traj: PpoTrajectory, grad: bool = False):
    """Loss = -surrogate + vf_coef * MSE(V, G) - ent_coef * entropy, averaged over steps.

    With ``grad`` returns (PpoLoss, grads) where grads follow ``params.arrays()``.
    """
    if traj.advantages is None:
        raise ValueError("advantages not computed")
    x = np.stack(traj.states)
    T = x.shape[0]
    acts = np.asarray(traj.actions)
    adv = np.asarray(traj.advantages, dtype=np.float64)
    ret = np.asarray(traj.returns, dtype=np.float64)
    old_logp = np.asarray(traj.log_probs, dtype=np.float64)

    logits, hp = mlp_forward(params.policy, x)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = logp_all[np.arange(T), acts]
    ratio = np.exp(logp - old_logp)
    lo, hi = 1.0 - params.clip, 1.0 + params.clip
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()
    ent = -(p * logp_all).sum(axis=1)
    v, hv = mlp_forward(params.value, x)
    v = v[:, 0]
    value_loss = ((v - ret) ** 2).mean()
    total = policy_loss + params.vf_coef * value_loss - params.ent_coef * ent.mean()
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite PPO loss {total}")
    loss = PpoLoss(float(total), float(policy_loss), float(value_loss), float(ent.mean()))
    if not grad:
        return loss

    # surrogate: min picks the unclipped branch whenever surr1 <= surr2,
    # which covers every in-band ratio; the clipped branch is flat in theta
    g_logp = np.where(surr1 <= surr2, -adv * ratio / T, 0.0)
    onehot = np.zeros_like(p)
    onehot[np.arange(T), acts] = 1.0
    dlogits = g_logp[:, None] * (onehot - p)
    # d(-c * mean H)/dz_k = (c / T) * p_k * (log p_k + H)
    dlogits += (params.ent_coef / T) * p * (logp_all + ent[:, None])
    gp = mlp_backward(params.policy, x, hp, dlogits)
    dv = (params.vf_coef * 2.0 / T) * (v - ret)
    gv = mlp_backward(params.value, x, hv, dv[:, None])
    return loss, [gp[k] for k in MLP_KEYS] + [gv[k] for k in MLP_KEYS]


def ppo_update(params: PpoParams, traj: PpoTrajectory, lr: float = 3e-4, optimizer=None):
    """One gradient step on the PPO loss; plain SGD with ``lr`` unless an optimizer is given.

    Returns (params, loss) where loss is evaluated before the step.
    """
    loss, grads = ppo_loss(params, traj, grad=True)
    if optimizer is None:
        for p, g in zip(params.arrays(), grads):
            p -= lr * g
    else:
        optimizer.step(grads)
    return params, loss


class PpoAgent:
    """Policy/value pair plus an Adam optimizer and its own generator."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 32, lr: float = 3e-4, gamma: float = 0.99,
                 seed: int = 0, **kw):
        self.params = PpoParams.init(obs_dim, n_actions, hidden=hidden, seed=seed, **kw)
        self.gamma = gamma
        self.optimizer = Adam(self.params.arrays(), lr=lr)
        self.rng = np.random.default_rng([seed, 1])

    def act(self, obs, greedy: bool = False):
        """Returns (action, log_prob, value)."""
        logp = policy_log_probs(self.params, obs)[0]
        if greedy:
            a = int(np.argmax(logp))
        else:
            a = int(self.rng.choice(len(logp), p=np.exp(logp) / np.exp(logp).sum()))
        return a, float(logp[a]), float(value_of(self.params, obs)[0])

    def update(self, traj: PpoTrajectory) -> PpoLoss:
        """Compute advantages then run ``update_epochs`` steps; returns the mean loss over them."""
        traj = compute_advantages(traj, self.gamma)
        losses = [ppo_update(self.params, traj, optimizer=self.optimizer)[1]
                  for _ in range(self.params.update_epochs)]
        return PpoLoss(*(float(np.mean([getattr(l, f) for l in losses]))
                         for f in ("total", "policy", "value", "entropy")))
