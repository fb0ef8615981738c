"""Node-classification tasks built from blocks: adjacency, inputs, labels, masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import synth_blocks
from .txgraph import (ACTIVITY_INPUT_COLUMNS, SparseAdjacency, TransactionGraph, activity_labels,
                      build_transaction_graph, row_normalize, split_masks)


@dataclass
class NodeTask:
    adj: SparseAdjacency
    x: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    graph: TransactionGraph | None = None

    @property
    def n_nodes(self) -> int:
        return self.adj.n_nodes

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]


def node_task(graph: TransactionGraph, *, normalize: bool = True, self_loops: bool = True, split_seed: int = 0,
              train_fraction: float = 0.7) -> NodeTask:
    """Activity-labelling task on ``graph``.

    The adjacency gets self-loops and (by default) row normalization so that
    sum aggregation does not blow up on hub addresses.
    """
    if graph.n_nodes == 0:
        raise ValueError("graph has no nodes")
    adj = graph.adj.with_self_loops() if self_loops else graph.adj
    if normalize:
        adj = row_normalize(adj)
    train, test = split_masks(graph.n_nodes, train_fraction, split_seed)
    x = np.ascontiguousarray(graph.features[:, list(ACTIVITY_INPUT_COLUMNS)])
    return NodeTask(adj, x, activity_labels(graph), train, test, graph)


def task_from_blocks(blocks, *, directed: bool = False, **kw) -> NodeTask:
    return node_task(build_transaction_graph(blocks, directed=directed), **kw)


def synthetic_task(seed: int, n_blocks: int, txs_per_block: float = 20, pool_size: int = 500, **kw) -> NodeTask:
    """Task over ``synth_blocks(seed, n_blocks, ...)``; masks are split with the same seed."""
    blocks = synth_blocks(seed, n_blocks, txs_per_block=txs_per_block, pool_size=pool_size)
    kw.setdefault("split_seed", seed)
    return task_from_blocks(blocks, **kw)
