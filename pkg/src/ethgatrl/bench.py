"""Accuracy and training wall time per (model, block count) cell.

Every cell trains on a task built from the first ``blocks`` synthetic (or
cached) blocks under one shared seed.  Only the training loop is timed;
``total_seconds`` adds task construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .gnn.model import ModelSpec
from .gnn.train import train_node_classifier
from .ingest import synth_blocks
from .workload import task_from_blocks

BENCH_COLUMNS = ("model", "blocks", "accuracy", "train_seconds", "total_seconds")
BENCH_MODELS = ("graphconv", "sage", "gat")
# desk-scale block counts; a laptop trains all nine cells in seconds
DESK_BLOCKS = (100, 300, 900)


@dataclass(frozen=True)
class BenchConfig:
    models: tuple = BENCH_MODELS
    blocks: tuple = DESK_BLOCKS
    epochs: int = 50
    hidden: int = 16
    sage_k: int = 5
    lr: float = 0.01
    seed: int = 0
    txs_per_block: float = 40
    pool_size: int = 2000

    def problems(self) -> list[str]:
        out = []
        bad = [m for m in self.models if m not in BENCH_MODELS]
        if bad:
            out.append(f"unknown bench models {bad}; choose from {list(BENCH_MODELS)}")
        if not self.models:
            out.append("no bench models given")
        if not self.blocks or min(self.blocks) < 1:
            out.append("block counts must be >= 1")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.sage_k < 1:
            out.append("sage_k must be >= 1")
        return out


@dataclass(frozen=True)
class BenchRow:
    model: str
    blocks: int
    accuracy: float
    train_seconds: float
    total_seconds: float

    def as_tuple(self):
        return (self.model, self.blocks, self.accuracy, self.train_seconds, self.total_seconds)


def run_bench(cfg: BenchConfig, blocks=None, clock=time.perf_counter) -> list[BenchRow]:
    """One row per (block count, model); ``blocks`` defaults to synthetic ones from ``cfg.seed``."""
    if blocks is None:
        blocks = synth_blocks(cfg.seed, max(cfg.blocks), txs_per_block=cfg.txs_per_block,
                              pool_size=cfg.pool_size)
    rows = []
    for n_blocks in cfg.blocks:
        for kind in cfg.models:
            t0 = clock()
            task = task_from_blocks(blocks[:n_blocks], split_seed=cfg.seed)
            spec = ModelSpec(kind, task.in_dim, hidden=cfg.hidden, sage_k=cfg.sage_k, sampler_seed=cfg.seed)
            t1 = clock()
            res = train_node_classifier(spec, task.adj, task.x, task.labels, task.train_mask, task.test_mask,
                                        epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed)
            t2 = clock()
            rows.append(BenchRow(kind, n_blocks, res.test_accuracy, t2 - t1, t2 - t0))
    return rows
