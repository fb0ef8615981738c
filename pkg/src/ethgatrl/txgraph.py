"""Address-level transaction graphs and the CSR primitives the GNN layers run on."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import BlockRecord

WEI_PER_ETHER = 10**18

FEATURE_COLUMNS = (
    "out_degree",
    "in_degree",
    "tx_count_sent",
    "tx_count_received",
    "log1p_ether_sent",
    "log1p_ether_received",
)


class GraphShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSR adjacency


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    """CSR matrix over ``n_nodes`` nodes.  Row ``i`` lists the neighbors ``j``
    with ``A[i, j] != 0``; columns within a row are strictly increasing."""

    n_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        for arr in (self.row_ptr, self.col_idx, self.values):
            arr.flags.writeable = False

    @classmethod
    def empty(cls, n_nodes: int) -> "SparseAdjacency":
        return cls(n_nodes, np.zeros(n_nodes + 1), np.zeros(0), np.zeros(0))

    @classmethod
    def identity(cls, n_nodes: int) -> "SparseAdjacency":
        return cls(n_nodes, np.arange(n_nodes + 1), np.arange(n_nodes), np.ones(n_nodes))

    @classmethod
    def from_coo(cls, n_nodes: int, rows, cols, values=None) -> "SparseAdjacency":
        """Build from coordinate triples; duplicate (i, j) pairs are summed."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.ones(rows.size) if values is None else np.asarray(values, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise GraphShapeError("rows, cols and values must have equal length")
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n_nodes or cols.max() >= n_nodes):
            raise GraphShapeError(f"edge index out of range for {n_nodes} nodes")
        if rows.size == 0:
            return cls.empty(n_nodes)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        first = np.ones(rows.size, dtype=bool)
        first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(first)
        merged = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
        row_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_nodes), out=row_ptr[1:])
        return cls(n_nodes, row_ptr, cols, merged)

    @classmethod
    def from_dense(cls, dense) -> "SparseAdjacency":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], rows, cols, dense[rows, cols])

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @cached_property
    def row_idx(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), np.diff(self.row_ptr))

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @cached_property
    def _transpose_layout(self):
        order = np.lexsort((self.row_idx, self.col_idx))
        row_ptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.col_idx, minlength=self.n_nodes), out=row_ptr[1:])
        return order, row_ptr, self.row_idx[order]

    def transpose_with(self, values) -> "SparseAdjacency":
        """Transpose of the matrix with this sparsity pattern and per-entry ``values``."""
        order, row_ptr, cols = self._transpose_layout
        return SparseAdjacency(self.n_nodes, row_ptr, cols, np.asarray(values)[order])

    @cached_property
    def T(self) -> "SparseAdjacency":
        return self.transpose_with(self.values)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[i]:self.row_ptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_nodes, self.n_nodes))
        dense[self.row_idx, self.col_idx] = self.values
        return dense

    def with_values(self, values) -> "SparseAdjacency":
        return SparseAdjacency(self.n_nodes, self.row_ptr, self.col_idx, values)

    def binarized(self) -> "SparseAdjacency":
        return self.with_values(np.ones(self.nnz))

    def symmetrized(self) -> "SparseAdjacency":
        """A + Aᵀ with self-loop weights counted once."""
        rows = np.concatenate([self.row_idx, self.col_idx])
        cols = np.concatenate([self.col_idx, self.row_idx])
        vals = np.concatenate([self.values, self.values])
        vals[self.nnz:][self.row_idx == self.col_idx] = 0.0
        sym = SparseAdjacency.from_coo(self.n_nodes, rows, cols, vals)
        return sym

    def with_self_loops(self, weight: float = 1.0) -> "SparseAdjacency":
        """Add ``weight`` on the diagonal (summed with any existing self-loop)."""
        n = self.n_nodes
        rows = np.concatenate([self.row_idx, np.arange(n)])
        cols = np.concatenate([self.col_idx, np.arange(n)])
        vals = np.concatenate([self.values, np.full(n, float(weight))])
        return SparseAdjacency.from_coo(n, rows, cols, vals)

    def permuted(self, perm) -> "SparseAdjacency":
        """Relabel nodes so that old node ``perm[k]`` becomes node ``k``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return SparseAdjacency.from_coo(self.n_nodes, inv[self.row_idx], inv[self.col_idx], self.values)

    def check(self) -> None:
        """Raise ``GraphShapeError`` if any CSR invariant is violated."""
        rp, ci = self.row_ptr, self.col_idx
        if rp.size != self.n_nodes + 1 or rp[0] != 0 or rp[-1] != ci.size or self.values.size != ci.size:
            raise GraphShapeError("row_ptr/col_idx/values sizes inconsistent")
        if np.any(np.diff(rp) < 0):
            raise GraphShapeError("row_ptr must be non-decreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_nodes):
            raise GraphShapeError("column index out of range")
        if ci.size > 1:
            same_row = self.row_idx[1:] == self.row_idx[:-1]
            if np.any(same_row & (ci[1:] <= ci[:-1])):
                raise GraphShapeError("columns within a row must be strictly increasing")


def spmm(adj: SparseAdjacency, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``A @ x``: row ``i`` is ``sum_j A[i, j] * x[j]``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != adj.n_nodes:
        raise GraphShapeError(f"adjacency has {adj.n_nodes} nodes, features have {x.shape[0]} rows")
    out = np.zeros((adj.n_nodes, x.shape[1]))
    if adj.nnz:
        contrib = x[adj.col_idx] * adj.values[:, None]
        nonempty = np.flatnonzero(adj.degrees)
        # segments of consecutive non-empty rows tile [0, nnz) exactly
        out[nonempty] = np.add.reduceat(contrib, adj.row_ptr[nonempty], axis=0)
    return out[:, 0] if squeeze else out


def segment_sum(adj: SparseAdjacency, edge_values: np.ndarray) -> np.ndarray:
    """Per-row sum of a per-entry array (length nnz, optionally with trailing dims)."""
    out = np.zeros((adj.n_nodes,) + edge_values.shape[1:])
    if adj.nnz:
        nonempty = np.flatnonzero(adj.degrees)
        out[nonempty] = np.add.reduceat(edge_values, adj.row_ptr[nonempty], axis=0)
    return out


def segment_max(adj: SparseAdjacency, edge_values: np.ndarray) -> np.ndarray:
    out = np.full(adj.n_nodes, -np.inf)
    if adj.nnz:
        nonempty = np.flatnonzero(adj.degrees)
        out[nonempty] = np.maximum.reduceat(edge_values, adj.row_ptr[nonempty])
    return out


def row_normalize(adj: SparseAdjacency) -> SparseAdjacency:
    sums = segment_sum(adj, adj.values)
    return adj.with_values(adj.values / sums[adj.row_idx]) if adj.nnz else adj


# ---------------------------------------------------------------------------
# neighbor sampling

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _edge_keys(seed: int, epoch: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) key per (seed, epoch, i, j), independent of every other row."""
    base = _splitmix(np.array([seed % 2**64], dtype=np.uint64))
    base = _splitmix(base ^ np.uint64(epoch % 2**64))
    h = _splitmix(base ^ rows.astype(np.uint64))
    h = _splitmix(h ^ cols.astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class SamplerConfig:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("sampler k must be >= 1")


def sample_neighbors(adj: SparseAdjacency, i: int, cfg: SamplerConfig, epoch: int = 0) -> np.ndarray:
    """Uniform ``min(k, deg)``-subset of the neighbors of ``i`` (sorted ids)."""
    if not 0 <= i < adj.n_nodes:
        raise IndexError(f"node {i} out of range")
    nbrs = adj.neighbors(i)
    if nbrs.size <= cfg.k:
        return nbrs.copy()
    keys = _edge_keys(cfg.seed, epoch, np.full(nbrs.size, i, dtype=np.int64), nbrs)
    return np.sort(nbrs[np.argsort(keys, kind="stable")[:cfg.k]])


def sample_adjacency(adj: SparseAdjacency, cfg: SamplerConfig, epoch: int = 0) -> SparseAdjacency:
    """Binary adjacency holding each node's sampled neighborhood.

    Row ``i`` equals ``sample_neighbors(adj, i, cfg, epoch)``.  Rows with
    degree at most ``k`` are kept whole without drawing keys.
    """
    deg = adj.degrees
    heavy = deg > cfg.k
    if not heavy.any():
        return adj.binarized()
    keep = np.ones(adj.nnz, dtype=bool)
    entry_heavy = heavy[adj.row_idx]
    idx = np.flatnonzero(entry_heavy)
    rows = adj.row_idx[idx]
    keys = _edge_keys(cfg.seed, epoch, rows, adj.col_idx[idx])
    order = np.lexsort((keys, rows))
    ranked = idx[order]
    rank = np.arange(ranked.size) - np.searchsorted(rows, rows[order], side="left")
    keep[ranked[rank >= cfg.k]] = False
    kept_rows = adj.row_idx[keep]
    row_ptr = np.zeros(adj.n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(kept_rows, minlength=adj.n_nodes), out=row_ptr[1:])
    return SparseAdjacency(adj.n_nodes, row_ptr, adj.col_idx[keep], np.ones(int(keep.sum())))


# ---------------------------------------------------------------------------
# transaction graph


@dataclass(frozen=True, eq=False)
class AddressIndex:
    addresses: tuple[str, ...]
    ids: dict = field(repr=False)

    @classmethod
    def from_addresses(cls, addresses: Iterable[str]) -> "AddressIndex":
        ordered = tuple(sorted(set(addresses)))
        return cls(ordered, {a: k for k, a in enumerate(ordered)})

    def __len__(self):
        return len(self.addresses)

    def id_of(self, address: str) -> int:
        return self.ids[address.lower()]

    def address_of(self, node: int) -> str:
        return self.addresses[node]


@dataclass(frozen=True)
class FeatureScaler:
    """Per-column affine standardization fitted on a training graph."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        if x.shape[0] == 0:
            return cls(np.zeros(x.shape[1]), np.ones(x.shape[1]))
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass(frozen=True, eq=False)
class TransactionGraph:
    index: AddressIndex
    adj: SparseAdjacency
    features: np.ndarray
    raw_features: np.ndarray
    scaler: FeatureScaler

    @property
    def n_nodes(self) -> int:
        return self.adj.n_nodes

    @property
    def tx_counts(self) -> np.ndarray:
        return self.raw_features[:, 2] + self.raw_features[:, 3]

    def __iter__(self):
        # (index, adj, features) unpacking
        return iter((self.index, self.adj, self.features))


def transfers(blocks: Sequence[BlockRecord]):
    """(sender, receiver, value_wei) for every non-creation transaction."""
    for block in blocks:
        for tx in block.transactions:
            if tx.to is not None:
                yield tx.sender, tx.to, tx.value


def build_transaction_graph(blocks: Sequence[BlockRecord], directed: bool = True, *, weight: str = "count",
                            self_loops: bool = False, scaler: FeatureScaler | None = None) -> TransactionGraph:
    """Address graph with one edge per transfer, parallel edges merged.

    Nodes are numbered in sorted address order, so the result does not
    depend on block order.  ``weight="value"`` weights edges by ether moved
    instead of transaction count.  Pass a fitted ``scaler`` to reuse a
    training graph's standardization.
    """
    if weight not in ("count", "value"):
        raise ValueError(f"unknown edge weighting {weight!r}")
    edges = list(transfers(blocks))
    index = AddressIndex.from_addresses(a for e in edges for a in e[:2])
    n = len(index)
    src = np.fromiter((index.ids[s] for s, _, _ in edges), dtype=np.int64, count=len(edges))
    dst = np.fromiter((index.ids[d] for _, d, _ in edges), dtype=np.int64, count=len(edges))
    ether = np.array([v / WEI_PER_ETHER for _, _, v in edges], dtype=np.float64)

    w = ether if weight == "value" else np.ones(len(edges))
    directed_adj = SparseAdjacency.from_coo(n, src, dst, w)
    adj = directed_adj if directed else directed_adj.symmetrized()
    if self_loops:
        adj = adj.with_self_loops()

    raw = np.zeros((n, len(FEATURE_COLUMNS)))
    if n:
        raw[:, 0] = directed_adj.degrees
        raw[:, 1] = np.bincount(directed_adj.col_idx, minlength=n)
        raw[:, 2] = np.bincount(src, minlength=n)
        raw[:, 3] = np.bincount(dst, minlength=n)
        raw[:, 4] = np.log1p(np.bincount(src, weights=ether, minlength=n))
        raw[:, 5] = np.log1p(np.bincount(dst, weights=ether, minlength=n))
    scaler = scaler or FeatureScaler.fit(raw)
    return TransactionGraph(index, adj, scaler.transform(raw), raw, scaler)


def activity_labels(graph: TransactionGraph) -> np.ndarray:
    """Binary high-activity label: total transaction count above the 75th percentile."""
    counts = graph.tx_counts
    if counts.size == 0:
        return np.zeros(0, dtype=np.int64)
    q = np.quantile(counts, 0.75)
    labels = counts > q
    if not labels.any():
        labels = counts >= q
    return labels.astype(np.int64)


# inputs for the activity task; the tx-count columns would leak the label
ACTIVITY_INPUT_COLUMNS = (0, 1, 4, 5)


def split_masks(n_nodes: int, train_fraction: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n_nodes)
    n_train = int(round(train_fraction * n_nodes))
    train = np.zeros(n_nodes, dtype=bool)
    train[perm[:n_train]] = True
    return train, ~train


# ---------------------------------------------------------------------------
# text export


def write_graph_text(path, adj: SparseAdjacency, features: np.ndarray) -> None:
    """Header ``N nnz D``, then row_ptr, col_idx and values on one line each,
    then one line per node of features.  Floats use shortest round-trip repr."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != adj.n_nodes:
        raise GraphShapeError("feature rows must match node count")
    d = features.shape[1] if features.ndim == 2 else 0
    lines = [f"{adj.n_nodes} {adj.nnz} {d}",
             " ".join(map(str, adj.row_ptr.tolist())),
             " ".join(map(str, adj.col_idx.tolist())),
             " ".join(map(repr, adj.values.tolist()))]
    lines.extend(" ".join(map(repr, row)) for row in features.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph_text(path) -> tuple[SparseAdjacency, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    try:
        n, nnz, d = (int(t) for t in lines[0].split())
        row_ptr = np.array(lines[1].split(), dtype=np.int64)
        col_idx = np.array(lines[2].split(), dtype=np.int64)
        values = np.array(lines[3].split(), dtype=np.float64)
        feats = np.array([ln.split() for ln in lines[4:4 + n]], dtype=np.float64).reshape(n, d)
    except (ValueError, IndexError) as exc:
        raise GraphShapeError(f"{path}: malformed graph file: {exc}") from None
    if col_idx.size != nnz:
        raise GraphShapeError(f"{path}: header says {nnz} entries, found {col_idx.size}")
    adj = SparseAdjacency(n, row_ptr, col_idx, values)
    adj.check()
    return adj, feats


def write_edges_ndjson(path, adj: SparseAdjacency, index: AddressIndex | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j, w in zip(adj.row_idx.tolist(), adj.col_idx.tolist(), adj.values.tolist()):
            rec = {"src": i, "dst": j, "weight": w}
            if index is not None:
                rec["src_address"] = index.address_of(i)
                rec["dst_address"] = index.address_of(j)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
