"""Ethereum transaction graphs, sparse GNN layers, and GAT + RL gas-limit optimization."""

__version__ = "0.1.0"
