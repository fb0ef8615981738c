"""Gas-limit simulator, closed-form throughput model, the threshold gas-limit search and
the tabular RL gas-limit experiment.

Block model (one block, gas limit G, N pending transactions):

    included   = min(N, floor(G / g_per_tx))
    congestion = 1 - included / N                 ("excluded" mode)
    time       = overhead + T * included + lam * congestion
    reward     = -time

``lam`` defaults to ``10 * T``.  In "fee" mode each pending transaction
draws a lognormal fee, the block takes the highest fees first and
congestion is the excluded fraction of above-median-fee transactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rl.qlearning import QTable, RlHyper, run_episode

DECREASE, HOLD, INCREASE = 0, 1, 2
ACTIONS = (DECREASE, HOLD, INCREASE)


def throughput(n: float, g: float, t: float) -> float:
    """Transactions processed per block, min(N, G / T)."""
    if t <= 0:
        raise ValueError("t must be > 0")
    return min(n, g / t)


def optimal_gas_closed_form(n: float, t: float) -> float:
    """Least G with G / T >= N, i.e. N * T."""
    if t <= 0 or n < 0:
        raise ValueError("need n >= 0 and t > 0")
    return n * t


@dataclass(frozen=True)
class GasModel:
    n_pending: int = 8
    t_per_tx: float = 1.0
    g_limit: int = 8 * 21000
    g_per_tx: int = 21000
    overhead: float = 0.0
    penalty: float | None = None

    def __post_init__(self):
        if self.t_per_tx <= 0:
            raise ValueError("t_per_tx must be > 0")
        if min(self.n_pending, self.g_limit, self.overhead) < 0 or self.g_per_tx <= 0:
            raise ValueError("gas model fields must be non-negative and g_per_tx > 0")
        if self.penalty is not None and self.penalty < 0:
            raise ValueError("penalty must be >= 0")

    @property
    def lam(self) -> float:
        return 10.0 * self.t_per_tx if self.penalty is None else self.penalty

    def with_limit(self, g_limit: int) -> "GasModel":
        return replace(self, g_limit=int(g_limit))


@dataclass(frozen=True)
class StepOutcome:
    txs_included: int
    block_processing_time: float
    congestion: float
    reward: float


def fee_congestion(fees: np.ndarray, included: int) -> float:
    """Excluded fraction of above-median-fee transactions when the top fees go first."""
    if fees.size == 0:
        return 0.0
    n_high = int(np.count_nonzero(fees > np.median(fees)))
    if n_high == 0:
        return 0.0
    return max(0, n_high - included) / n_high


def simulate_block(model: GasModel, fees: np.ndarray | None = None) -> StepOutcome:
    n = int(model.n_pending)
    included = min(n, model.g_limit // model.g_per_tx)
    if fees is not None:
        congestion = fee_congestion(fees, included)
    else:
        congestion = 1.0 - included / n if n else 0.0
    time = model.overhead + model.t_per_tx * included + model.lam * congestion
    return StepOutcome(int(included), float(time), float(congestion), -float(time))


# -- threshold search (algorithm1_*)


@dataclass(frozen=True)
class Algorithm1Config:
    gas_limit: int
    gas_limit_increment: int
    max_gas_limit: int
    target_time: float
    congestion_threshold: float
    max_iterations: int = 1000

    def __post_init__(self):
        if self.gas_limit_increment <= 0:
            raise ValueError("gas_limit_increment must be > 0")
        if not 0 < self.gas_limit <= self.max_gas_limit:
            raise ValueError("need 0 < gas_limit <= max_gas_limit")
        if not 0.0 <= self.congestion_threshold <= 1.0:
            raise ValueError("congestion_threshold must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class Alg1Step:
    iteration: int
    gas_limit: int
    expected_time: float
    congestion: float


def clamp_gas(g: int, increment: int, max_gas_limit: int) -> int:
    return int(min(max(g, increment), max_gas_limit))


def algorithm1_converged(out: StepOutcome, cfg: Algorithm1Config, model: GasModel) -> bool:
    return (abs(out.block_processing_time - cfg.target_time) <= model.t_per_tx
            and out.congestion <= cfg.congestion_threshold)


def algorithm1_optimize(cfg: Algorithm1Config, model: GasModel):
    """Deterministic local search over the gas limit.

    Congestion above threshold raises the limit (more room means fewer
    excluded transactions).  Otherwise time above target lowers it and time
    below target raises it.  Time is assumed non-decreasing in G, which holds
    when ``lam <= T * N``.  Returns (final gas limit, trace).
    """
    g = clamp_gas(cfg.gas_limit, cfg.gas_limit_increment, cfg.max_gas_limit)
    trace = []
    for it in range(cfg.max_iterations):
        out = simulate_block(model.with_limit(g))
        trace.append(Alg1Step(it, g, out.block_processing_time, out.congestion))
        if algorithm1_converged(out, cfg, model):
            break
        if out.congestion > cfg.congestion_threshold:
            g += cfg.gas_limit_increment
        elif out.block_processing_time > cfg.target_time:
            g -= cfg.gas_limit_increment
        else:
            g += cfg.gas_limit_increment
        g = clamp_gas(g, cfg.gas_limit_increment, cfg.max_gas_limit)
    return g, trace


# -- RL environment


@dataclass(frozen=True)
class GasEnvConfig:
    n_pending: int = 8
    t_per_tx: float = 1.0
    g_per_tx: int = 21000
    increment: int = 21000
    max_gas_limit: int = 16 * 21000
    overhead: float = 0.0
    penalty: float | None = None
    arrival: str = "fixed"
    congestion_mode: str = "excluded"
    horizon: int = 64
    pending_buckets: int = 8
    congestion_buckets: int = 4
    gas_buckets: int = 16
    start_gas_limit: int | None = None

    def problems(self) -> list[str]:
        out = []
        if self.t_per_tx <= 0:
            out.append("t_per_tx must be > 0")
        if self.n_pending < 0:
            out.append("n_pending must be >= 0")
        if self.g_per_tx <= 0 or self.increment <= 0:
            out.append("g_per_tx and increment must be > 0")
        if self.max_gas_limit < self.increment:
            out.append("max_gas_limit must be >= increment")
        if self.arrival not in ("fixed", "poisson"):
            out.append("arrival must be 'fixed' or 'poisson'")
        if self.congestion_mode not in ("excluded", "fee"):
            out.append("congestion_mode must be 'excluded' or 'fee'")
        if min(self.horizon, self.pending_buckets, self.congestion_buckets, self.gas_buckets) < 1:
            out.append("horizon and bucket counts must be >= 1")
        if self.start_gas_limit is not None and not self.increment <= self.start_gas_limit <= self.max_gas_limit:
            out.append("start_gas_limit must lie in [increment, max_gas_limit]")
        return out

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def model(self, g_limit: int, n_pending: int) -> GasModel:
        return GasModel(n_pending, self.t_per_tx, g_limit, self.g_per_tx, self.overhead, self.penalty)

    @property
    def gas_levels(self) -> np.ndarray:
        return np.arange(self.increment, self.max_gas_limit + 1, self.increment)


@dataclass(frozen=True)
class GasEnvState:
    pending: int
    congestion: float
    gas_limit: int

    def bucket(self, cfg: GasEnvConfig) -> tuple[int, int, int]:
        top = max(2 * cfg.n_pending, 1)
        p = min(cfg.pending_buckets - 1, self.pending * cfg.pending_buckets // (top + 1))
        c = min(cfg.congestion_buckets - 1, int(self.congestion * cfg.congestion_buckets))
        span = max(cfg.max_gas_limit - cfg.increment, 1)
        g = min(cfg.gas_buckets - 1, (self.gas_limit - cfg.increment) * cfg.gas_buckets // (span + 1))
        return int(p), int(c), int(g)


def draw_pending(cfg: GasEnvConfig, rng: np.random.Generator) -> int:
    if cfg.arrival == "fixed":
        return cfg.n_pending
    return int(rng.poisson(cfg.n_pending))


def env_step(state: GasEnvState, action: int, cfg: GasEnvConfig, rng: np.random.Generator):
    """Apply ``action`` to the gas limit, process the pending block, draw the next pending count."""
    if action not in ACTIONS:
        raise ValueError(f"invalid action {action}")
    g = clamp_gas(state.gas_limit + (action - 1) * cfg.increment, cfg.increment, cfg.max_gas_limit)
    fees = rng.lognormal(size=state.pending) if cfg.congestion_mode == "fee" else None
    out = simulate_block(cfg.model(g, state.pending), fees)
    return GasEnvState(draw_pending(cfg, rng), out.congestion, g), out


class GasEnv:
    """Fixed-horizon episodic wrapper around ``env_step`` with bucketed states."""

    actions = list(ACTIONS)

    def __init__(self, cfg: GasEnvConfig):
        self.cfg = cfg
        self.state: GasEnvState | None = None
        self.last: StepOutcome | None = None
        self.t = 0
        self._rng = None

    def reset(self, rng):
        self._rng = rng
        cfg = self.cfg
        if cfg.start_gas_limit is None:
            levels = cfg.gas_levels
            g = int(levels[rng.integers(len(levels))])
        else:
            g = cfg.start_gas_limit
        self.state = GasEnvState(draw_pending(cfg, rng), 0.0, g)
        self.t = 0
        return self.state.bucket(cfg)

    def step(self, action):
        self.state, self.last = env_step(self.state, action, self.cfg, self._rng)
        self.t += 1
        return self.state.bucket(self.cfg), self.last.reward, False, self.t >= self.cfg.horizon


# -- experiment

EXPERIMENT_COLUMNS = ("block", "episode", "gas_limit", "throughput", "epsilon", "learning_rate", "reward")
ALG1_COLUMNS = ("iteration", "gas_limit", "expected_time", "congestion")


@dataclass
class GasExperiment:
    cfg: GasEnvConfig
    q: QTable
    rows: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)

    @property
    def throughputs(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows], dtype=np.float64)

    def quartile(self, which: int) -> np.ndarray:
        """Throughput over quarter ``which`` (0..3) of the global block index."""
        tp = self.throughputs
        q = len(tp) // 4
        if q == 0:
            return tp
        return tp[which * q:(which + 1) * q] if which < 3 else tp[3 * q:]

    def optimum_throughput(self) -> float:
        g_star = optimal_gas_closed_form(self.cfg.n_pending, self.cfg.g_per_tx)
        return throughput(self.cfg.n_pending, g_star, self.cfg.g_per_tx)


DEFAULT_GAS_EPISODES = 400


def default_gas_hyper() -> RlHyper:
    # epsilon reaches its floor after ~300 of the default 400 episodes
    return RlHyper(alpha=0.3, gamma=0.8, epsilon=1.0, epsilon_decay=0.985, epsilon_floor=0.01)


def run_gas_rl_experiment(cfg: GasEnvConfig, hp: RlHyper, episodes: int, seed: int = 0) -> GasExperiment:
    """Train the tabular agent; one CSV row per simulated block."""
    rng = np.random.default_rng(seed)
    env = GasEnv(cfg)
    exp = GasExperiment(cfg, QTable())
    for ep in range(episodes):
        eps, alpha = hp.epsilon_at(ep), hp.alpha_at(ep)

        def record(s, a, r, s2, ep=ep, eps=eps, alpha=alpha):
            exp.rows.append((len(exp.rows), ep, env.state.gas_limit, env.last.txs_included, eps, alpha, r))

        exp.returns.append(run_episode(env, exp.q, hp, eps, alpha, rng, on_step=record))
        exp.epsilons.append(eps)
    return exp


def greedy_rollout(exp: GasExperiment, blocks: int, seed: int = 0) -> np.ndarray:
    """Throughput of the greedy policy (no learning) over ``blocks`` blocks."""
    rng = np.random.default_rng(seed)
    env = GasEnv(exp.cfg)
    s = env.reset(rng)
    out = []
    for _ in range(blocks):
        s, _, _, done = env.step(exp.q.greedy(s, env.actions))
        out.append(env.last.txs_included)
        if done:
            s = env.reset(rng)
    return np.array(out, dtype=np.float64)
