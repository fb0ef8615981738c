"""GraphConv, GraphSAGE, GAT and GAT-RL layers with analytic backward passes.

Embeddings are row-major ``(n_nodes, dim)`` float64 arrays and weights map
rows, so a layer computes ``h @ W``.  Every ``*_forward`` returns the output
array; pass ``cache=True`` to also get the intermediate values the matching
``*_backward`` needs.  Backward functions take the upstream gradient and
return ``(param_grads, input_grad)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from ..txgraph import (GraphShapeError, SamplerConfig, SparseAdjacency, sample_adjacency, segment_max,
                       segment_sum, spmm)

DEFAULT_LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class Activation:
    name: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.name not in ("relu", "leaky_relu", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.name!r}")
        if self.name == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky slope must lie in (0, 1)")

    @classmethod
    def parse(cls, text: "str | Activation") -> "Activation":
        """``relu``, ``sigmoid``, ``identity`` or ``leaky_relu[:slope]``."""
        if isinstance(text, Activation):
            return text
        name, _, slope = text.partition(":")
        return cls(name, float(slope)) if slope else cls(name)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            return np.maximum(z, 0.0)
        if self.name == "leaky_relu":
            return np.where(z > 0, z, self.slope * z)
        if self.name == "sigmoid":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        return z

    def grad(self, z: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            return (z > 0).astype(np.float64)
        if self.name == "leaky_relu":
            return np.where(z > 0, 1.0, self.slope)
        if self.name == "sigmoid":
            return out * (1.0 - out)
        return np.ones_like(z)

    def __str__(self):
        return f"leaky_relu:{self.slope}" if self.name == "leaky_relu" else self.name


RELU = Activation("relu")
IDENTITY = Activation("identity")


@dataclass
class LayerParams:
    """Weights of one layer.  ``attn`` is the attention vector of GAT layers
    (length ``2 * d_out``); ``skip_scale`` the GAT-RL output scale."""

    w: np.ndarray
    b: Optional[np.ndarray] = None
    attn: Optional[np.ndarray] = None
    skip_scale: Optional[np.ndarray] = None

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]

    def copy(self) -> "LayerParams":
        return replace(self, **{name: arr.copy() for name, arr in self.arrays()})

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]


def _check(adj: SparseAdjacency, h: np.ndarray, params: LayerParams):
    if h.ndim != 2 or h.shape[0] != adj.n_nodes:
        raise GraphShapeError(f"embedding shape {h.shape} does not match {adj.n_nodes} nodes")
    if h.shape[1] != params.w.shape[0]:
        raise GraphShapeError(f"embedding dim {h.shape[1]} != weight rows {params.w.shape[0]}")
    if params.b is not None and params.b.shape != (params.w.shape[1],):
        raise GraphShapeError("bias length must equal output dim")


def _zero_grads(params: LayerParams) -> LayerParams:
    return replace(params, **{name: np.zeros_like(arr) for name, arr in params.arrays()})


# ---------------------------------------------------------------------------
# GraphConv: h'_i = act(sum_j A_ij h_j W + b)


def graphconv_forward(params: LayerParams, adj: SparseAdjacency, h: np.ndarray, act: Activation = RELU,
                      cache: bool = False):
    _check(adj, h, params)
    agg = spmm(adj, h)
    z = agg @ params.w
    if params.b is not None:
        z = z + params.b
    out = act(z)
    if cache:
        return out, {"adj": adj, "agg": agg, "z": z, "out": out, "act": act}
    return out


def graphconv_backward(params: LayerParams, c: dict, dout: np.ndarray):
    dz = dout * c["act"].grad(c["z"], c["out"])
    grads = _zero_grads(params)
    grads.w = c["agg"].T @ dz
    if params.b is not None:
        grads.b = dz.sum(axis=0)
    dh = spmm(c["adj"].T, dz @ params.w.T)
    return grads, dh


# ---------------------------------------------------------------------------
# GraphSAGE: sampled-neighborhood pooling, then transform


def sage_aggregate(adj: SparseAdjacency, h: np.ndarray, cfg: SamplerConfig, pooling: str = "sum",
                   epoch: int = 0):
    """Pool sampled neighbor rows.  ``sum`` divides by ``k``; ``mean`` by the
    actual sample size.  Returns ``(pooled, pooling_matrix)``."""
    if pooling not in ("sum", "mean"):
        raise ValueError(f"unknown pooling {pooling!r}")
    sampled = sample_adjacency(adj, cfg, epoch)
    if pooling == "sum":
        scale = np.full(sampled.nnz, 1.0 / cfg.k)
    else:
        scale = 1.0 / sampled.degrees[sampled.row_idx].astype(np.float64)
    pool_mat = sampled.with_values(scale)
    return spmm(pool_mat, h), pool_mat


def sage_forward(params: LayerParams, adj: SparseAdjacency, h: np.ndarray, cfg: SamplerConfig,
                 pooling: str = "sum", act: Activation = RELU, epoch: int = 0, cache: bool = False,
                 pool_mat: SparseAdjacency | None = None):
    _check(adj, h, params)
    if pool_mat is None:
        agg, pool_mat = sage_aggregate(adj, h, cfg, pooling, epoch)
    else:
        agg = spmm(pool_mat, h)
    z = agg @ params.w
    if params.b is not None:
        z = z + params.b
    out = act(z)
    if cache:
        return out, {"adj": pool_mat, "agg": agg, "z": z, "out": out, "act": act}
    return out


sage_backward = graphconv_backward


# ---------------------------------------------------------------------------
# GAT


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Attention coefficients on the adjacency's sparsity pattern.

    ``alpha`` holds the softmax-normalized coefficients as matrix values;
    ``scores`` are the pre-softmax LeakyReLU scores per stored entry.
    """

    alpha: SparseAdjacency
    scores: np.ndarray
    pre: np.ndarray
    wh: np.ndarray
    slope: float

    def dense(self) -> np.ndarray:
        return self.alpha.to_dense()


def gat_attention(params: LayerParams, adj: SparseAdjacency, h: np.ndarray,
                  slope: float = DEFAULT_LEAKY_SLOPE) -> AttentionMatrix:
    _check(adj, h, params)
    wh = h @ params.w
    d = wh.shape[1]
    if params.attn is None or params.attn.shape != (2 * d,):
        raise GraphShapeError(f"attention vector must have length {2 * d}")
    s_src = wh @ params.attn[:d]
    s_dst = wh @ params.attn[d:]
    pre = s_src[adj.row_idx] + s_dst[adj.col_idx]
    e = np.where(pre > 0, pre, slope * pre)
    ex = np.exp(e - segment_max(adj, e)[adj.row_idx])
    alpha = ex / segment_sum(adj, ex)[adj.row_idx]
    return AttentionMatrix(adj.with_values(alpha), e, pre, wh, slope)


def _attention_backward(params: LayerParams, adj: SparseAdjacency, att: AttentionMatrix, h: np.ndarray,
                        dagg: np.ndarray, grads: LayerParams) -> np.ndarray:
    """Backprop ``dagg`` (gradient w.r.t. ``sum_j alpha_ij Wh_j``) into W, attn and h."""
    wh = att.wh
    d = wh.shape[1]
    alpha = att.alpha.values
    rows, cols = adj.row_idx, adj.col_idx
    dwh = spmm(adj.transpose_with(alpha), dagg)
    dalpha = np.einsum("ek,ek->e", dagg[rows], wh[cols])
    de = alpha * (dalpha - segment_sum(adj, alpha * dalpha)[rows])
    dpre = de * np.where(att.pre > 0, 1.0, att.slope)
    ds_src = segment_sum(adj, dpre)
    ds_dst = np.bincount(cols, weights=dpre, minlength=adj.n_nodes)
    a_src, a_dst = params.attn[:d], params.attn[d:]
    grads.attn = np.concatenate([wh.T @ ds_src, wh.T @ ds_dst])
    dwh += np.outer(ds_src, a_src) + np.outer(ds_dst, a_dst)
    grads.w = h.T @ dwh
    return dwh @ params.w.T


def gat_forward(params: LayerParams, adj: SparseAdjacency, h: np.ndarray, act: Activation = IDENTITY,
                slope: float = DEFAULT_LEAKY_SLOPE, cache: bool = False):
    """``act(sum_j alpha_ij W h_j)``; no bias.  Isolated nodes aggregate to zero."""
    att = gat_attention(params, adj, h, slope)
    z = spmm(att.alpha, att.wh)
    out = act(z)
    if cache:
        return out, {"adj": adj, "att": att, "h": h, "z": z, "out": out, "act": act}
    return out


def gat_backward(params: LayerParams, c: dict, dout: np.ndarray):
    dz = dout * c["act"].grad(c["z"], c["out"])
    grads = _zero_grads(params)
    dh = _attention_backward(params, c["adj"], c["att"], c["h"], dz, grads)
    return grads, dh


def gatrl_forward(params: LayerParams, adj: SparseAdjacency, h: np.ndarray, act: Activation = RELU,
                  slope: float = DEFAULT_LEAKY_SLOPE, cache: bool = False):
    """``act(sum_j alpha_ij W h_j + b [+ h_i]) * skip_scale``.

    The identity residual ``h_i`` is added only when input and output
    dimensions agree.
    """
    if params.skip_scale is None or params.b is None:
        raise GraphShapeError("GAT-RL layers need a bias and a skip_scale vector")
    att = gat_attention(params, adj, h, slope)
    z = spmm(att.alpha, att.wh) + params.b
    residual = h.shape[1] == params.d_out
    if residual:
        z = z + h
    y = act(z)
    out = y * params.skip_scale
    if cache:
        return out, {"adj": adj, "att": att, "h": h, "z": z, "y": y, "act": act, "residual": residual}
    return out


def gatrl_backward(params: LayerParams, c: dict, dout: np.ndarray):
    grads = _zero_grads(params)
    grads.skip_scale = (dout * c["y"]).sum(axis=0)
    dz = dout * params.skip_scale * c["act"].grad(c["z"], c["y"])
    grads.b = dz.sum(axis=0)
    dh = _attention_backward(params, c["adj"], c["att"], c["h"], dz, grads)
    if c["residual"]:
        dh = dh + dz
    return grads, dh
