import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from ethgatrl.ingest import synth_blocks
from ethgatrl.gnn import GNNModel, ModelSpec, loss_and_grads, masked_cross_entropy
from ethgatrl.txgraph import SparseAdjacency

import oracles


class FixtureChain:
    """In-process JSON-RPC server answering from a list of block dicts."""

    def __init__(self, blocks):
        self.blocks = {int(b["number"], 16): b for b in blocks}
        self.fail_first = 0          # answer HTTP 503 to this many requests
        self.rpc_error_for = set()   # block numbers answered with an RPC error
        self.requests = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.delay = 0.0
        self._lock = threading.Lock()

    def handle(self, body):
        with self._lock:
            self.requests += 1
            n = self.requests
        if n <= self.fail_first:
            return 503, None
        req = json.loads(body)
        if req["method"] == "eth_blockNumber":
            return 200, {"jsonrpc": "2.0", "id": req["id"], "result": hex(max(self.blocks))}
        number = int(req["params"][0], 16)
        if number in self.rpc_error_for:
            return 200, {"jsonrpc": "2.0", "id": req["id"], "error": {"code": -32000, "message": "boom"}}
        return 200, {"jsonrpc": "2.0", "id": req["id"], "result": self.blocks.get(number)}


@pytest.fixture
def rpc_server():
    servers = []

    def start(blocks):
        chain = FixtureChain(blocks)

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                import time
                body = self.rfile.read(int(self.headers["Content-Length"]))
                with chain._lock:
                    chain.in_flight += 1
                    chain.max_in_flight = max(chain.max_in_flight, chain.in_flight)
                try:
                    if chain.delay:
                        time.sleep(chain.delay)
                    status, payload = chain.handle(body)
                finally:
                    with chain._lock:
                        chain.in_flight -= 1
                data = json.dumps(payload).encode() if payload is not None else b""
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_address[1]}", chain

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


@pytest.fixture(scope="session")
def small_blocks():
    return synth_blocks(seed=3, n_blocks=30, txs_per_block=12, pool_size=80)


def random_adjacency(rng, n, n_edges, weighted=True):
    rows = rng.integers(0, n, size=n_edges)
    cols = rng.integers(0, n, size=n_edges)
    vals = rng.uniform(0.5, 2.0, size=n_edges) if weighted else None
    return SparseAdjacency.from_coo(n, rows, cols, vals)


@pytest.fixture
def rand_adj():
    return random_adjacency


def separable_graph(n_per=10, seed=0):
    """Two disjoint rings; each node's neighbors carry its class's feature sign."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per
    rows, cols = [], []
    for c in range(2):
        base = c * n_per
        for k in range(n_per):
            a, b = base + k, base + (k + 1) % n_per
            rows += [a, b]
            cols += [b, a]
    adj = SparseAdjacency.from_coo(n, rows, cols)
    labels = np.repeat([0, 1], n_per)
    x = np.where(labels[:, None] == 0, -1.0, 1.0) * rng.uniform(0.5, 1.5, size=(n, 2))
    perm = rng.permutation(n)
    train = np.zeros(n, bool)
    train[perm[: int(0.7 * n)]] = True
    return adj, x, labels, train, ~train


def model_fd_errors(kind, act="relu", n=6, seed=0, d_in=3, hidden=4):
    """Relative error of analytic vs central-difference gradients, per parameter name."""
    rng = np.random.default_rng(seed)
    adj = random_adjacency(rng, n, 3 * n)
    x = rng.normal(size=(n, d_in))
    labels = rng.integers(0, 3, n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    spec = ModelSpec(kind, d_in, hidden=hidden, n_layers=2, n_classes=3, activation=act, sage_k=2,
                     sampler_seed=3)
    model = GNNModel.init(spec, seed)
    for p in model.layers:
        if p.b is not None:
            p.b[:] = rng.normal(size=p.b.shape) * 0.3
        if p.skip_scale is not None:
            p.skip_scale[:] = rng.normal(size=p.skip_scale.shape)
    _, grads, _ = loss_and_grads(model, adj, x, labels, mask, epoch=2)

    def f():
        return masked_cross_entropy(model.forward(adj, x, epoch=2), labels, mask)

    errs = {}
    for (name, arr), g in zip(model.named_parameters(), grads):
        errs[name] = oracles.rel_err(g, oracles.central_difference(f, arr))
    return errs


ALG1_CASES = [
    # start, inc, max, target, threshold, n, t, gpt, lam
    (1000, 1000, 50_000, 12.0, 0.5, 20, 1.0, 1000, 0.0),
    (50_000, 1000, 50_000, 12.0, 0.5, 20, 1.0, 1000, 0.0),
    (5000, 1000, 200_000, 40.0, 0.2, 50, 1.0, 2000, 5.0),
    (200_000, 1000, 200_000, 40.0, 0.2, 50, 1.0, 2000, 5.0),
    (3000, 1000, 100_000, 4.5, 0.3, 8, 0.5, 5000, 2.0),
    (100_000, 1000, 100_000, 4.5, 0.3, 8, 0.5, 5000, 2.0),
    (21000, 1000, 400_000, 15.0, 0.0, 15, 1.0, 21000, 0.0),
    (400_000, 1000, 400_000, 15.0, 0.0, 15, 1.0, 21000, 0.0),
    (60_000, 1000, 90_000, 30.0, 0.4, 40, 1.0, 1500, 10.0),
    (7000, 1000, 90_000, 2.0, 0.1, 3, 0.7, 10_000, 1.0),
]


def pytest_terminal_summary(terminalreporter):
    results = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", ()))
            if props.get("criterion") is None or rep.when != "call":
                continue
            results[props["criterion"]] = (status == "passed", props["label"], rep.duration)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, label, secs = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {label}  [{secs:.2f} s]")
