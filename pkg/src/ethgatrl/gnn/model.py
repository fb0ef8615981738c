"""Stacked GNN layers with a linear classification head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..txgraph import SamplerConfig, SparseAdjacency, sample_adjacency
from . import layers as L

LAYER_KINDS = ("graphconv", "sage", "gat", "gatrl")
CHECKPOINT_FORMAT = "ethgatrl-gnn-checkpoint"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_dim: int
    hidden: int = 16
    n_layers: int = 2
    n_classes: int = 2
    activation: str = "relu"
    sage_k: int = 10
    sage_pooling: str = "sum"
    sampler_seed: int = 0
    leaky_slope: float = L.DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        problems = []
        if self.kind not in LAYER_KINDS:
            problems.append(f"kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.in_dim < 1 or self.hidden < 1 or self.n_layers < 1:
            problems.append("in_dim, hidden and n_layers must be positive")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.sage_k < 1:
            problems.append("sage_k must be >= 1")
        if self.sage_pooling not in ("sum", "mean"):
            problems.append("sage_pooling must be 'sum' or 'mean'")
        if problems:
            raise ValueError("; ".join(problems))
        L.Activation.parse(self.activation)

    @property
    def act(self) -> L.Activation:
        return L.Activation.parse(self.activation)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.sage_k, self.sampler_seed)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_layer(kind: str, d_in: int, d_out: int, rng: np.random.Generator) -> L.LayerParams:
    p = L.LayerParams(w=_glorot(rng, d_in, d_out, (d_in, d_out)))
    if kind != "gat":
        p.b = np.zeros(d_out)
    if kind in ("gat", "gatrl"):
        p.attn = _glorot(rng, 2 * d_out, 1, (2 * d_out,))
    if kind == "gatrl":
        p.skip_scale = np.ones(d_out)
    return p


class GNNModel:
    def __init__(self, spec: ModelSpec, layers: list[L.LayerParams], head: L.LayerParams):
        self.spec = spec
        self.layers = layers
        self.head = head

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "GNNModel":
        rng = np.random.default_rng(seed)
        dims = [spec.in_dim] + [spec.hidden] * spec.n_layers
        layers = [init_layer(spec.kind, dims[i], dims[i + 1], rng) for i in range(spec.n_layers)]
        head = L.LayerParams(w=_glorot(rng, spec.hidden, spec.n_classes, (spec.hidden, spec.n_classes)),
                             b=np.zeros(spec.n_classes))
        return cls(spec, layers, head)

    def parameters(self) -> list[np.ndarray]:
        return [arr for p in self.layers + [self.head] for _, arr in p.arrays()]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, p in enumerate(self.layers):
            out.extend((f"layer{i}.{name}", arr) for name, arr in p.arrays())
        out.extend((f"head.{name}", arr) for name, arr in self.head.arrays())
        return out

    def copy(self) -> "GNNModel":
        return GNNModel(self.spec, [p.copy() for p in self.layers], self.head.copy())

    # -- forward / backward

    def _layer_forward(self, p, adj, h, act, pool_mat):
        kind = self.spec.kind
        if kind == "graphconv":
            return L.graphconv_forward(p, adj, h, act, cache=True)
        if kind == "sage":
            return L.sage_forward(p, adj, h, self.spec.sampler, act=act, cache=True, pool_mat=pool_mat)
        if kind == "gat":
            return L.gat_forward(p, adj, h, act, slope=self.spec.leaky_slope, cache=True)
        return L.gatrl_forward(p, adj, h, act, slope=self.spec.leaky_slope, cache=True)

    def pooling_matrix(self, adj: SparseAdjacency, epoch: int) -> SparseAdjacency | None:
        if self.spec.kind != "sage":
            return None
        sampled = sample_adjacency(adj, self.spec.sampler, epoch)
        if self.spec.sage_pooling == "sum":
            return sampled.with_values(np.full(sampled.nnz, 1.0 / self.spec.sage_k))
        return sampled.with_values(1.0 / sampled.degrees[sampled.row_idx].astype(np.float64))

    def forward(self, adj: SparseAdjacency, x: np.ndarray, epoch: int = 0, cache: bool = False):
        """Class logits for every node.  GraphSAGE resamples per ``epoch``."""
        act = self.spec.act
        pool_mat = self.pooling_matrix(adj, epoch)
        h = np.asarray(x, dtype=np.float64)
        caches = []
        for p in self.layers:
            h, c = self._layer_forward(p, adj, h, act, pool_mat)
            caches.append(c)
        logits = h @ self.head.w + self.head.b
        if cache:
            return logits, {"layers": caches, "h_last": h}
        return logits

    def backward(self, caches: dict, dlogits: np.ndarray) -> list[np.ndarray]:
        """Gradients of every parameter, ordered as ``parameters()``."""
        head_grads = L.LayerParams(w=caches["h_last"].T @ dlogits, b=dlogits.sum(axis=0))
        dh = dlogits @ self.head.w.T
        backward = {"graphconv": L.graphconv_backward, "sage": L.sage_backward,
                    "gat": L.gat_backward, "gatrl": L.gatrl_backward}[self.spec.kind]
        layer_grads = []
        for p, c in zip(reversed(self.layers), reversed(caches["layers"])):
            g, dh = backward(p, c, dh)
            layer_grads.append(g)
        layer_grads.reverse()
        return [arr for g in layer_grads + [head_grads] for _, arr in g.arrays()]

    # -- checkpoints

    def to_dict(self) -> dict:
        def enc(p):
            return {name: arr.tolist() for name, arr in p.arrays()}
        return {"format": CHECKPOINT_FORMAT, "version": 1, "spec": asdict(self.spec),
                "layers": [enc(p) for p in self.layers], "head": enc(self.head)}

    @classmethod
    def from_dict(cls, d: dict) -> "GNNModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a GNN checkpoint")

        def dec(obj):
            return L.LayerParams(**{k: np.asarray(v, dtype=np.float64) for k, v in obj.items()})
        return cls(ModelSpec(**d["spec"]), [dec(p) for p in d["layers"]], dec(d["head"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GNNModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
