"""Masked node-classification loss and the full-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..optim import make_optimizer
from ..txgraph import SparseAdjacency
from .model import GNNModel, ModelSpec

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def masked_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, grad: bool = False):
    """Mean negative log-likelihood over the masked nodes.

    With ``grad=True`` returns ``(loss, dlogits)``; rows outside the mask
    get zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("loss mask selects no nodes")
    logp = _log_softmax(logits[idx])
    y = np.asarray(labels)[idx]
    loss = -logp[np.arange(idx.size), y].mean()
    if not grad:
        return loss
    d = np.exp(logp)
    d[np.arange(idx.size), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[idx] = d / idx.size
    return loss, dlogits


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float((logits[mask].argmax(axis=1) == np.asarray(labels)[mask]).mean())


def loss_and_grads(model: GNNModel, adj: SparseAdjacency, x: np.ndarray, labels, mask, epoch: int = 0):
    logits, caches = model.forward(adj, x, epoch=epoch, cache=True)
    loss, dlogits = masked_cross_entropy(logits, labels, mask, grad=True)
    return loss, model.backward(caches, dlogits), logits


class Trainer:
    """Owns a model and its optimizer; one ``step`` is one full-batch epoch."""

    def __init__(self, model: GNNModel, adj: SparseAdjacency, labels, train_mask, test_mask,
                 lr: float = 0.01, optimizer: str = "adam"):
        if np.any(np.asarray(train_mask) & np.asarray(test_mask)):
            raise ValueError("train and test masks overlap")
        self.model = model
        self.adj = adj
        self.labels = np.asarray(labels)
        self.train_mask = np.asarray(train_mask, dtype=bool)
        self.test_mask = np.asarray(test_mask, dtype=bool)
        self.opt = make_optimizer(optimizer, model.parameters(), lr)
        self.epoch = 0

    def step(self, x: np.ndarray) -> tuple[float, float]:
        """Train once on ``x``; returns (train loss, test accuracy) of the pre-update forward pass."""
        loss, grads, logits = loss_and_grads(self.model, self.adj, x, self.labels, self.train_mask, self.epoch)
        if not np.isfinite(loss):
            raise TrainingDiverged(self.epoch, loss)
        self.opt.step(grads)
        acc = accuracy(logits, self.labels, self.test_mask)
        self.epoch += 1
        return float(loss), acc

    def evaluate(self, x: np.ndarray, mask=None) -> tuple[float, float]:
        mask = self.train_mask if mask is None else mask
        logits = self.model.forward(self.adj, x, epoch=self.epoch)
        return float(masked_cross_entropy(logits, self.labels, mask)), accuracy(logits, self.labels, self.test_mask)


@dataclass
class TrainResult:
    model: GNNModel
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    test_accuracy: float = float("nan")

    def csv_rows(self):
        return [(e, l, a) for e, (l, a) in enumerate(zip(self.losses, self.accuracies))]


def train_node_classifier(model: GNNModel | ModelSpec, adj: SparseAdjacency, x: np.ndarray, labels,
                          train_mask, test_mask, epochs: int = 200, lr: float = 0.01,
                          optimizer: str = "adam", seed: int = 0) -> TrainResult:
    """Full-batch training; ``seed`` initializes the model when given a spec."""
    if isinstance(model, ModelSpec):
        model = GNNModel.init(model, seed)
    trainer = Trainer(model, adj, labels, train_mask, test_mask, lr=lr, optimizer=optimizer)
    result = TrainResult(model)
    for _ in range(epochs):
        loss, acc = trainer.step(x)
        result.losses.append(loss)
        result.accuracies.append(acc)
    logits = model.forward(adj, x, epoch=trainer.epoch)
    result.test_accuracy = accuracy(logits, labels, trainer.test_mask)
    log.debug("trained %s for %d epochs: test accuracy %.4f", model.spec.kind, epochs, result.test_accuracy)
    return result
