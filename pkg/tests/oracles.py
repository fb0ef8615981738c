"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: per-node Python loops over dense
adjacency rows, scalar arithmetic where practical, no shared code with the
vectorized kernels apart from the neighbor sampler (which the GraphSAGE
oracle must replay to see the same neighborhoods).
"""

import math

import numpy as np

from ethgatrl.txgraph import sample_neighbors


def act_loop(name, z, slope=0.01):
    if name == "relu":
        return np.array([max(v, 0.0) for v in z])
    if name == "leaky_relu":
        return np.array([v if v > 0 else slope * v for v in z])
    if name == "sigmoid":
        return np.array([1.0 / (1.0 + math.exp(-v)) for v in z])
    return np.array(z, dtype=float)


def matvec(h_row, w):
    d_in, d_out = w.shape
    return np.array([sum(h_row[m] * w[m, k] for m in range(d_in)) for k in range(d_out)])


def graphconv_loop(w, b, dense, h, act="relu"):
    n = dense.shape[0]
    out = []
    for i in range(n):
        s = np.zeros(w.shape[1])
        for j in range(n):
            if dense[i, j] != 0:
                s = s + dense[i, j] * matvec(h[j], w)
        out.append(act_loop(act, s + (b if b is not None else 0.0)))
    return np.array(out)


def sage_loop(w, b, adj, h, cfg, pooling="sum", act="relu", epoch=0):
    out = []
    for i in range(adj.n_nodes):
        nbrs = sample_neighbors(adj, i, cfg, epoch).tolist()
        pooled = np.zeros(h.shape[1])
        for j in nbrs:
            pooled = pooled + h[j]
        if pooling == "sum":
            pooled = pooled / cfg.k
        elif nbrs:
            pooled = pooled / len(nbrs)
        out.append(act_loop(act, matvec(pooled, w) + b))
    return np.array(out)


def leaky(v, slope):
    return v if v > 0 else slope * v


def gat_alpha_loop(w, attn, dense, h, slope=0.2):
    """Row i -> {j: alpha_ij} over the nonzero entries of row i."""
    n = dense.shape[0]
    wh = [matvec(h[j], w) for j in range(n)]
    d = w.shape[1]
    rows = []
    for i in range(n):
        nbrs = [j for j in range(n) if dense[i, j] != 0]
        scores = {}
        for j in nbrs:
            s = sum(attn[k] * wh[i][k] for k in range(d)) + sum(attn[d + k] * wh[j][k] for k in range(d))
            scores[j] = leaky(s, slope)
        if scores:
            m = max(scores.values())
            ex = {j: math.exp(v - m) for j, v in scores.items()}
            tot = sum(ex.values())
            rows.append({j: v / tot for j, v in ex.items()})
        else:
            rows.append({})
    return rows, wh


def gat_loop(w, attn, dense, h, act="identity", slope=0.2):
    alphas, wh = gat_alpha_loop(w, attn, dense, h, slope)
    out = []
    for i, row in enumerate(alphas):
        s = np.zeros(w.shape[1])
        for j, a in row.items():
            s = s + a * wh[j]
        out.append(act_loop(act, s))
    return np.array(out)


def gatrl_loop(w, b, attn, skip, dense, h, act="relu", slope=0.2):
    alphas, wh = gat_alpha_loop(w, attn, dense, h, slope)
    out = []
    for i, row in enumerate(alphas):
        s = np.zeros(w.shape[1])
        for j, a in row.items():
            s = s + a * wh[j]
        s = s + b
        if h.shape[1] == w.shape[1]:
            s = s + h[i]
        out.append(act_loop(act, s) * skip)
    return np.array(out)


def central_difference(f, arr, step=1e-5):
    """Gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place and restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def cross_entropy_loop(logits, labels, mask):
    total, count = 0.0, 0
    for i, keep in enumerate(mask):
        if not keep:
            continue
        row = logits[i]
        lse = math.log(sum(math.exp(v) for v in row))
        total += lse - row[labels[i]]
        count += 1
    return total / count


def value_iteration(next_state, rewards, gamma, terminal=(), tol=1e-13):
    """Q* for a deterministic finite MDP by plain Bellman sweeps."""
    n_s, n_a = len(rewards), len(rewards[0])
    q = [[0.0] * n_a for _ in range(n_s)]
    while True:
        delta = 0.0
        new = [[0.0] * n_a for _ in range(n_s)]
        for s in range(n_s):
            for a in range(n_a):
                s2 = int(next_state[s][a])
                future = 0.0 if s2 in terminal else max(q[s2])
                new[s][a] = rewards[s][a] + gamma * future
                delta = max(delta, abs(new[s][a] - q[s][a]))
        q = new
        if delta < tol:
            return np.array(q)


def greedy_policy(q_rows):
    """Lowest index among the maxima of each row."""
    out = []
    for row in q_rows:
        best = 0
        for a in range(1, len(row)):
            if row[a] > row[best]:
                best = a
        out.append(best)
    return out


def grid_search_gas(start, increment, max_gas, target, threshold, n, t, g_per_tx, overhead=0.0, lam=None):
    """Exhaustive scan of the increment grid; feasible point nearest ``start`` (ties to the lower)."""
    lam = 10.0 * t if lam is None else lam
    best = None
    g = increment
    while g <= max_gas:
        inc = min(n, g // g_per_tx)
        cong = 1.0 - inc / n
        time = overhead + t * inc + lam * cong
        if abs(time - target) <= t and cong <= threshold:
            if best is None or abs(g - start) < abs(best - start):
                best = g
        g += increment
    return best
