import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ethgatrl.rl import (PpoAgent, PpoParams, PpoTrajectory, QTable, RlHyper, TabularMDP, Transition,
                         compute_advantages, epsilon_greedy, policy_log_probs, ppo_loss, ppo_update, q_update,
                         train_q_agent, value_of)
from oracles import central_difference, greedy_policy, rel_err, value_iteration

# -- q_update


def test_q_update_zero_reward_zero_table():
    q = QTable()
    q_update(q, Transition(0, 1, 0.0, 2), RlHyper(), [0, 1])
    assert all(v == 0.0 for v in q.values.values())


def test_q_update_terminal_alpha_one():
    q = QTable()
    q[0, 0] = 7.0
    q[3, 0] = 100.0
    q_update(q, Transition(0, 0, -1.5, 3, terminal=True), RlHyper(alpha=1.0), [0, 1])
    assert q[0, 0] == -1.5


def test_q_update_worked_example():
    q = QTable()
    q[0, 0] = 1.0
    q[1, 0], q[1, 1] = 3.0, -4.0
    q_update(q, Transition(0, 0, 2.0, 1), RlHyper(alpha=0.5, gamma=0.9), [0, 1])
    # 1 + 0.5 * (2 + 0.9 * 3 - 1)
    assert q[0, 0] == pytest.approx(2.85, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(-3, 3), st.floats(0.01, 1), st.floats(0, 0.99),
       st.integers(0, 2), st.integers(0, 2), st.integers(0, 2), st.booleans())
def test_q_update_changes_one_entry_by_delta(vals, r, alpha, gamma, s, a, s2, term):
    q = QTable()
    for k, v in enumerate(vals):
        q[k // 3, k % 3] = v
    before = dict(q.values)
    hp = RlHyper(alpha=alpha, gamma=gamma)
    future = 0.0 if term else max(before[s2, b] for b in range(3))
    delta = alpha * (r + gamma * future - before[s, a])
    q_update(q, Transition(s, a, r, s2, term), hp, [0, 1, 2])
    for key, v in before.items():
        if key == (s, a):
            assert q[key] == pytest.approx(v + delta, abs=1e-12)
        else:
            assert q[key] == v


def test_q_update_rejects_non_finite_reward():
    with pytest.raises(ValueError):
        q_update(QTable(), Transition(0, 0, math.nan, 0), RlHyper(), [0])


def test_hyper_ranges():
    for bad in (dict(alpha=0.0), dict(gamma=1.0), dict(epsilon=1.5), dict(epsilon=0.1, epsilon_floor=0.2)):
        with pytest.raises(ValueError):
            RlHyper(**bad)


# -- epsilon greedy


def test_epsilon_zero_is_argmax():
    q = QTable()
    q[0, 2] = 1.0
    rng = np.random.default_rng(0)
    assert {epsilon_greedy(q, 0, [0, 1, 2, 3], 0.0, rng) for _ in range(100)} == {2}
    assert epsilon_greedy(q, 0, [0, 1, 2, 3], RlHyper(epsilon=0.0, epsilon_floor=0.0), rng) == 2


def test_epsilon_one_uniform():
    rng = np.random.default_rng(123)
    q = QTable()
    q[0, 3] = 5.0
    draws = np.array([epsilon_greedy(q, 0, [0, 1, 2, 3], 1.0, rng) for _ in range(40000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - 0.25) <= 0.01)


def test_tie_rule_and_empty_actions():
    assert epsilon_greedy(QTable(), 0, [2, 0, 1], 0.0, np.random.default_rng(0)) == 0
    with pytest.raises(ValueError):
        epsilon_greedy(QTable(), 0, [], 0.0, np.random.default_rng(0))


# -- training


def test_zero_episodes():
    env = TabularMDP([[0]], [[1.0]])
    q = QTable()
    res = train_q_agent(env, RlHyper(), 0, seed=1, q=q)
    assert res.returns == [] and res.epsilons == [] and len(q) == 0


def test_epsilon_trace_monotone_to_floor():
    env = TabularMDP([[0, 0]], [[0.0, 1.0]], horizon=3)
    hp = RlHyper(epsilon=1.0, epsilon_decay=0.9, epsilon_floor=0.05)
    res = train_q_agent(env, hp, 100, seed=0)
    eps = np.array(res.epsilons)
    assert len(eps) == 100 and np.all(np.diff(eps) <= 0) and eps.min() >= 0.05
    assert eps[-1] == 0.05


def test_training_deterministic_per_seed():
    env = TabularMDP([[1, 2], [2, 0], [0, 1]], [[0.1, 0.2], [0.0, 1.0], [0.5, -1.0]], horizon=10)
    a = train_q_agent(env, RlHyper(), 50, seed=4)
    b = train_q_agent(env, RlHyper(), 50, seed=4)
    assert a.q.values == b.q.values and a.returns == b.returns


def test_non_finite_env_reward_aborts():
    env = TabularMDP([[0]], [[math.inf]])
    with pytest.raises(ValueError):
        train_q_agent(env, RlHyper(), 1)


def test_chain_mdp_matches_value_iteration():
    # states 0..4, action 0 = left, 1 = right; entering 4 pays 1 and ends the episode
    nxt = [[max(s - 1, 0), s + 1] for s in range(4)] + [[4, 4]]
    rew = [[-0.01, -0.01], [-0.01, -0.01], [-0.01, -0.01], [-0.01, 1.0], [0.0, 0.0]]
    env = TabularMDP(nxt, rew, horizon=20, terminal_states={4})
    hp = RlHyper(alpha=0.5, gamma=0.9, epsilon=1.0, epsilon_decay=0.999, epsilon_floor=0.3)
    res = train_q_agent(env, hp, 2000, seed=0)
    q_star = value_iteration(nxt, rew, 0.9, terminal={4})
    got = res.q.to_array(5, 2)[:4]
    assert np.max(np.abs(got - q_star[:4])) < 1e-3
    assert greedy_policy(got) == greedy_policy(q_star[:4]) == [1, 1, 1, 1]


def random_mdp(rng):
    n_s, n_a = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    return rng.integers(0, n_s, size=(n_s, n_a)), rng.uniform(-1, 1, size=(n_s, n_a))


def test_random_mdps_match_value_iteration():
    rng = np.random.default_rng(2024)
    hp = RlHyper(alpha=1.0, gamma=0.9, epsilon=1.0, epsilon_decay=1.0, epsilon_floor=1.0)
    for k in range(5):
        nxt, rew = random_mdp(rng)
        res = train_q_agent(TabularMDP(nxt, rew, horizon=20), hp, 1500, seed=k)
        q_star = value_iteration(nxt, rew, 0.9)
        got = res.q.to_array(*rew.shape)
        assert np.max(np.abs(got - q_star)) < 1e-3
        assert greedy_policy(got) == greedy_policy(q_star)


def test_bandit_gamma_zero_converges_to_arm_means():
    means = np.array([0.2, 0.5, -0.3])
    env = TabularMDP([[0, 0, 0]], [means], terminal_states=(), horizon=1, reward_noise=0.5)
    seen = {a: [] for a in range(3)}
    hp = RlHyper(alpha=1.0, gamma=0.0, epsilon=1.0, epsilon_decay=1.0, epsilon_floor=1.0, alpha_mode="visit")
    res = train_q_agent(env, hp, 10_000, seed=9, on_step=lambda s, a, r, s2: seen[a].append(r))
    for a in range(3):
        assert res.q[0, a] == pytest.approx(np.mean(seen[a]), abs=1e-9)
        assert abs(res.q[0, a] - means[a]) < 0.05


# -- advantages


def traj_of(rewards, values, obs_dim=2, actions=None, log_probs=None):
    t = PpoTrajectory()
    for i, (r, v) in enumerate(zip(rewards, values)):
        t.add(np.full(obs_dim, 0.1 * i), 0 if actions is None else actions[i],
              0.0 if log_probs is None else log_probs[i], v, r)
    return t


def test_advantages_zero_when_values_equal_returns():
    t = compute_advantages(traj_of([1.0, 2.0], [3.0, 2.0]), gamma=1.0)
    assert t.advantages == [0.0, 0.0]


def test_advantages_constant_case():
    t = compute_advantages(traj_of([1.0, 1.0], [0.0, 0.0]), gamma=0.0)
    assert t.returns == [1.0, 1.0]
    assert t.advantages == [0.0, 0.0]


def test_advantages_hand_recursion():
    t = compute_advantages(traj_of([1.0, 0.0, 2.0], [0.0, 0.0, 0.0]), gamma=0.5)
    # G2 = 2, G1 = 0 + 0.5*2 = 1, G0 = 1 + 0.5*1 = 1.5
    assert t.returns == [1.5, 1.0, 2.0]
    raw = np.array([1.5, 1.0, 2.0])
    want = (raw - 1.5) / math.sqrt(((raw - 1.5) ** 2).mean())
    np.testing.assert_allclose(t.advantages, want, atol=1e-15)


def test_advantages_empty_and_nonfinite():
    with pytest.raises(ValueError):
        compute_advantages(PpoTrajectory(), 0.9)
    with pytest.raises(ValueError):
        compute_advantages(traj_of([math.inf, 0.0], [0.0, 0.0]), 0.9)


# -- PPO


def test_clip_ratio_range():
    with pytest.raises(ValueError):
        PpoParams.init(2, 2, clip=1.0)


def _fd_traj(params, rng):
    obs = rng.normal(size=(3, 4))
    lp = policy_log_probs(params, obs)
    acts = [0, 2, 1]
    cur = lp[np.arange(3), acts]
    # ratios 0.95 (inside band), 1.65 (above), 0.67 (below)
    old = cur + np.array([0.05, -0.5, 0.4])
    t = PpoTrajectory()
    for i in range(3):
        t.add(obs[i], acts[i], old[i], rng.normal(), rng.normal())
    t = compute_advantages(t, 0.9)
    return t


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ppo_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = PpoParams.init(4, 3, hidden=5, seed=seed)
    # larger output layer so the policy term is not negligible
    params.policy["w2"] *= 100
    traj = _fd_traj(params, rng)
    _, grads = ppo_loss(params, traj, grad=True)
    for arr, g in zip(params.arrays(), grads):
        num = central_difference(lambda: ppo_loss(params, traj).total, arr)
        assert rel_err(g, num) < 1e-4


def test_positive_advantage_increases_log_prob():
    params = PpoParams.init(3, 4, hidden=8, seed=5)
    obs = np.array([0.3, -0.2, 0.9])
    before = policy_log_probs(params, obs)[0, 2]
    t = PpoTrajectory()
    t.add(obs, 2, before, 0.0, 1.0)
    t.returns, t.advantages = [1.0], [1.0]
    ppo_update(params, t, lr=1e-2)
    assert policy_log_probs(params, obs)[0, 2] > before


def test_zero_advantage_zero_value_loss_keeps_params():
    params = PpoParams.init(2, 3, hidden=4, seed=1, ent_coef=0.0)
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(4, 2))
    lp = policy_log_probs(params, obs)
    v = value_of(params, obs)
    t = PpoTrajectory()
    for i in range(4):
        t.add(obs[i], i % 3, lp[i, i % 3], v[i], 0.0)
    t.returns, t.advantages = v.tolist(), [0.0] * 4
    before = [a.copy() for a in params.arrays()]
    ppo_update(params, t, lr=0.1)
    for a, b in zip(before, params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_value_network_learns_fixed_return():
    # one-step episodes that always pay 2.5
    agent = PpoAgent(2, 2, hidden=16, lr=1e-2, gamma=0.9, seed=3)
    obs = np.array([0.5, -0.5])
    for _ in range(300):
        t = PpoTrajectory()
        a, lp, v = agent.act(obs)
        t.add(obs, a, lp, v, 2.5)
        agent.update(t)
    assert abs(value_of(agent.params, obs)[0] - 2.5) <= 0.05 * 2.5
