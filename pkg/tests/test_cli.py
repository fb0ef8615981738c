import csv
import json
import socket

import numpy as np
import pytest

from ethgatrl.cli import main
from ethgatrl.ingest import cache_read, cache_write, synth_blocks
from ethgatrl.report import fingerprint, read_csv, write_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)


def test_train_deterministic_bytes(tmp_path, no_network):
    for name in ("a", "b"):
        assert run("train", "--synthetic", 15, "--epochs", 6, "--seed", 42, "--out", tmp_path / name) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "train_loss.csv").read_bytes() == (b / "train_loss.csv").read_bytes()
    cfg_a = json.loads((a / "config.json").read_text())
    assert cfg_a["fingerprint"] == json.loads((b / "config.json").read_text())["fingerprint"]
    assert cfg_a["fingerprint"] == fingerprint(cfg_a["config"])
    header, rows = read_csv(a / "train_loss.csv")
    assert header == ["epoch", "loss", "accuracy"] and len(rows) == 6
    assert json.loads((a / "summary.json").read_text())["fingerprint"] == cfg_a["fingerprint"]


def test_train_sage_from_cache(tmp_path, no_network):
    cache = tmp_path / "blocks.ndjson"
    cache_write(cache, synth_blocks(1, 20, pool_size=60))
    assert run("train", "--cache", cache, "--model", "sage", "--sage-k", 3, "--epochs", 3,
               "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "model.json").is_file()


def test_graph_on_empty_cache_names_path(tmp_path, capsys, no_network):
    cache = tmp_path / "empty.ndjson"
    cache.write_text("")
    assert run("graph", "--cache", cache, "--out", tmp_path / "o") == 3
    assert str(cache) in capsys.readouterr().err


def test_missing_cache_is_config_error(tmp_path, capsys):
    assert run("graph", "--cache", tmp_path / "nope.ndjson") == 2
    assert "nope.ndjson" in capsys.readouterr().err


def test_config_errors_listed_together(tmp_path, capsys):
    code = run("train", "--synthetic", 0, "--hidden", 0, "--activation", "swish", "--lr", -1, "--epochs", -2)
    err = capsys.readouterr().err
    assert code == 2
    assert len([l for l in err.splitlines() if "error:" in l]) == 5


def test_gas_opt_config_errors(capsys):
    assert run("gas-opt", "--t-per-tx", 0, "--alpha", 2, "--epsilon-floor", 2, "--start-gas", 0) == 2
    assert len(capsys.readouterr().err.splitlines()) >= 4


def test_graph_exports(tmp_path, no_network):
    assert run("graph", "--synthetic", 10, "--out", tmp_path) == 0
    for name in ("graph.txt", "edges.ndjson", "nodes.csv", "config.json"):
        assert (tmp_path / name).is_file()
    header, rows = read_csv(tmp_path / "nodes.csv")
    assert header[:3] == ["node", "address", "label"] and len(header) == 9
    assert rows and all(r[1].startswith("0x") for r in rows)


@pytest.mark.slow
def test_gas_opt_default_meets_bound(tmp_path, no_network):
    assert run("gas-opt", "--out", tmp_path) == 0
    with open(tmp_path / "gas_rl.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    tp = np.array([float(r["throughput"]) for r in rows])
    q = len(tp) // 4
    assert tp[3 * q:].mean() >= 0.95 * 8
    eps = [float(r["epsilon"]) for r in rows]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    _, alg1 = read_csv(tmp_path / "alg1_trace.csv")
    assert alg1
    _, episodes = read_csv(tmp_path / "gas_episodes.csv")
    assert len(episodes) == 400


def test_gatrl_cli(tmp_path, no_network):
    out = tmp_path / "g"
    assert run("gatrl", "--synthetic", 10, "--pool-size", 60, "--epochs", 4, "--horizon", 3, "--compare",
               "--hidden", 8, "--out", out) == 0
    header, rows = read_csv(out / "gatrl_loss.csv")
    assert header == ["epoch", "gat_loss", "ppo_loss"] and len(rows) == 4
    header, rows = read_csv(out / "ppo_trace.csv")
    assert header == ["epoch", "ppo_loss", "value_loss", "entropy"]
    header, rows = read_csv(out / "comparison.csv")
    assert len(rows) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert {"gat_test_accuracy", "gatrl_test_accuracy", "fingerprint"} <= set(summary)


def test_gatrl_no_ppo(tmp_path, no_network):
    assert run("gatrl", "--synthetic", 8, "--pool-size", 40, "--epochs", 3, "--no-ppo", "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "gatrl_loss.csv")
    assert [r[2] for r in rows] == ["0.0"] * 3


def test_bench_single_cell_and_repeatable(tmp_path, no_network):
    args = ("bench", "--models", "sage", "--blocks", 20, "--epochs", 3, "--seed", 5)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    ha, ra = read_csv(tmp_path / "a" / "bench.csv")
    _, rb = read_csv(tmp_path / "b" / "bench.csv")
    assert ha == ["model", "blocks", "accuracy", "train_seconds", "total_seconds"]
    assert len(ra) == 1 and ra[0][:3] == rb[0][:3]
    assert ra[0][0] == "sage" and ra[0][1] == "20"


def test_bench_rejects_unknown_model(capsys):
    assert run("bench", "--models", "gcn", "--blocks", 0) == 2
    assert len(capsys.readouterr().err.splitlines()) == 2


def test_fetch_roundtrip(tmp_path, rpc_server):
    blocks = synth_blocks(2, 6, pool_size=30)
    url, _ = rpc_server([b.to_json() for b in blocks])
    cache = tmp_path / "c.ndjson"
    assert run("fetch", "--endpoint", url, "--start", 2, "--end", 5, "--cache", cache) == 0
    assert cache_read(cache) == blocks[1:5]
    assert json.loads((tmp_path / "config.json").read_text())["config"]["endpoint"] == url


def test_fetch_env_endpoint_and_protocol_error(tmp_path, rpc_server, monkeypatch, capsys):
    url, chain = rpc_server([b.to_json() for b in synth_blocks(2, 3)])
    chain.rpc_error_for = {2}
    monkeypatch.setenv("ETHGATRL_ENDPOINT", url)
    assert run("fetch", "--start", 1, "--end", 3, "--cache", tmp_path / "c.ndjson") == 3
    assert "2" in capsys.readouterr().err


def test_fetch_without_endpoint(tmp_path, monkeypatch):
    monkeypatch.delenv("ETHGATRL_ENDPOINT", raising=False)
    assert run("fetch", "--start", 1, "--end", 2, "--cache", tmp_path / "c.ndjson") == 2


def test_csv_format(tmp_path):
    p = write_csv(tmp_path / "x.csv", ("a", "b", "c"), [(1, 0.1, 'say "hi", ok'), (np.int64(2), np.float64(1e-20), "x\ny")])
    raw = p.read_bytes()
    assert b"\r" not in raw.replace(b"x\ny", b"")
    assert raw.startswith(b"a,b,c\n1,0.1,\"say \"\"hi\"\", ok\"\n2,1e-20,")
    _, rows = read_csv(p)
    assert rows[1][2] == "x\ny" and float(rows[0][1]) == 0.1
