"""Command-line entry point: ``ethgatrl <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error (every problem is listed),
3 runtime error.  Each run writes ``config.json`` with a sha256 fingerprint
of its configuration into the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import BENCH_COLUMNS, BENCH_MODELS, DESK_BLOCKS, BenchConfig, run_bench
from .gasopt import (ALG1_COLUMNS, DEFAULT_GAS_EPISODES, EXPERIMENT_COLUMNS, Algorithm1Config, GasEnvConfig,
                     GasModel, algorithm1_optimize, default_gas_hyper, run_gas_rl_experiment)
from .gatrl import DEFAULT_EPOCHS, DEFAULT_HORIZON, compare_gat_vs_gatrl, train_combined
from .gnn.layers import Activation
from .gnn.model import LAYER_KINDS, ModelSpec
from .gnn.train import TrainingDiverged, train_node_classifier
from .ingest import (ENDPOINT_ENV_VAR, BlockRange, IngestError, RpcClient, cache_read, cache_write, fetch_range,
                     resolve_endpoint, synth_blocks)
from .report import write_csv, write_json, write_run_config
from .rl.qlearning import RlHyper
from .txgraph import FEATURE_COLUMNS, activity_labels, build_transaction_graph, write_edges_ndjson, write_graph_text
from .workload import node_task

log = logging.getLogger("ethgatrl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


# -- argument groups


def _add_source(p: argparse.ArgumentParser, synthetic_default=None) -> None:
    g = p.add_argument_group("block source (choose one)")
    g.add_argument("--cache", type=Path, help="read blocks from an NDJSON cache")
    g.add_argument("--endpoint", help="fetch blocks over JSON-RPC (requires --start/--end)")
    g.add_argument("--start", type=int, help="first block number (with --endpoint)")
    g.add_argument("--end", type=int, help="last block number, inclusive (with --endpoint)")
    g.add_argument("--synthetic", type=int, default=synthetic_default, metavar="N",
                   help="generate N synthetic blocks from --seed")
    g.add_argument("--txs-per-block", type=float, default=20.0, help="synthetic mean transactions per block")
    g.add_argument("--pool-size", type=int, default=500, help="synthetic address pool size")


def _add_model(p: argparse.ArgumentParser, kinds=LAYER_KINDS, default="gat") -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=kinds, default=default)
    g.add_argument("--hidden", type=int, default=16)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--activation", default="relu", help="relu, leaky_relu[:slope], sigmoid or identity")
    g.add_argument("--sage-k", type=int, default=10)
    g.add_argument("--sage-pooling", choices=("sum", "mean"), default="sum")
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--no-normalize", action="store_true", help="keep raw edge weights (no row normalization)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ethgatrl", description="Ethereum transaction-graph GNN and RL experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download a block range into an NDJSON cache")
    p.add_argument("--endpoint", help=f"JSON-RPC URL (default: ${ENDPOINT_ENV_VAR})")
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--end", type=int, required=True)
    p.add_argument("--cache", type=Path, required=True, help="output NDJSON path")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", type=Path, default=None, help="directory for config.json (default: cache directory)")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("graph", help="build the address graph and export it")
    _add_source(p)
    p.add_argument("--directed", action="store_true", help="keep edge direction (default: symmetrized)")
    p.add_argument("--weight", choices=("count", "value"), default="count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="train a node classifier on the activity task")
    _add_source(p)
    _add_model(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gas-opt", help="RL gas-limit experiment and threshold gas-limit search")
    g = p.add_argument_group("block model")
    g.add_argument("--n-pending", type=int, default=8)
    g.add_argument("--t-per-tx", type=float, default=1.0)
    g.add_argument("--g-per-tx", type=int, default=21000)
    g.add_argument("--increment", type=int, default=21000)
    g.add_argument("--max-gas", type=int, default=16 * 21000)
    g.add_argument("--overhead", type=float, default=0.0)
    g.add_argument("--penalty", type=float, default=None, help="congestion penalty (default 10 * t-per-tx)")
    g.add_argument("--arrival", choices=("fixed", "poisson"), default="fixed")
    g.add_argument("--congestion-mode", choices=("excluded", "fee"), default="excluded")
    g = p.add_argument_group("RL agent")
    hp = default_gas_hyper()
    g.add_argument("--episodes", type=int, default=DEFAULT_GAS_EPISODES)
    g.add_argument("--horizon", type=int, default=64)
    g.add_argument("--alpha", type=float, default=hp.alpha)
    g.add_argument("--gamma", type=float, default=hp.gamma)
    g.add_argument("--epsilon", type=float, default=hp.epsilon)
    g.add_argument("--epsilon-decay", type=float, default=hp.epsilon_decay)
    g.add_argument("--epsilon-floor", type=float, default=hp.epsilon_floor)
    g = p.add_argument_group("threshold search")
    g.add_argument("--start-gas", type=int, default=21000)
    g.add_argument("--alg1-increment", type=int, default=1000)
    g.add_argument("--target-time", type=float, default=None, help="default: t-per-tx * n-pending")
    g.add_argument("--congestion-threshold", type=float, default=0.0)
    g.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_gas_opt)

    p = sub.add_parser("gatrl", help="combined GAT + PPO training")
    _add_source(p)
    _add_model(p, kinds=("gat", "gatrl"), default="gat")
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--ppo-lr", type=float, default=3e-4)
    p.add_argument("--no-ppo", action="store_true", help="disable the PPO branch (plain GAT)")
    p.add_argument("--compare", action="store_true", help="also train plain GAT and write comparison.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_gatrl)

    p = sub.add_parser("bench", help="accuracy / training time per model and block count")
    _add_source(p)
    p.add_argument("--models", nargs="+", default=list(BENCH_MODELS))
    p.add_argument("--blocks", nargs="+", type=int, default=list(DESK_BLOCKS))
    p.add_argument("--epochs", type=int, default=BenchConfig.epochs)
    p.add_argument("--hidden", type=int, default=BenchConfig.hidden)
    p.add_argument("--sage-k", type=int, default=BenchConfig.sage_k)
    p.add_argument("--lr", type=float, default=BenchConfig.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_bench, txs_per_block=BenchConfig.txs_per_block, pool_size=BenchConfig.pool_size)
    return ap


# -- helpers


def run_config(args) -> dict:
    skip = {"func", "verbose", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _source_problems(args, required: bool = True) -> list[str]:
    chosen = [name for name, v in (("--cache", args.cache), ("--endpoint", args.endpoint),
                                   ("--synthetic", args.synthetic)) if v is not None]
    out = []
    if len(chosen) > 1:
        out.append(f"choose one block source, got {' and '.join(chosen)}")
    elif not chosen and required:
        out.append("no block source: pass --cache, --endpoint with --start/--end, or --synthetic N")
    if args.endpoint is not None:
        if args.start is None or args.end is None:
            out.append("--endpoint needs --start and --end")
        elif args.start > args.end or args.start < 0:
            out.append("need 0 <= --start <= --end")
    elif args.start is not None or args.end is not None:
        out.append("--start/--end only apply with --endpoint")
    if args.cache is not None and not args.cache.is_file():
        out.append(f"cache file not found: {args.cache}")
    if args.synthetic is not None and args.synthetic < 1:
        out.append("--synthetic must be >= 1")
    if args.txs_per_block < 0 or args.pool_size < 1:
        out.append("--txs-per-block must be >= 0 and --pool-size >= 1")
    return out


def _model_problems(args) -> list[str]:
    out = []
    if args.hidden < 1 or args.layers < 1:
        out.append("--hidden and --layers must be >= 1")
    if args.sage_k < 1:
        out.append("--sage-k must be >= 1")
    if not args.lr > 0:
        out.append("--lr must be > 0")
    try:
        Activation.parse(args.activation)
    except ValueError as e:
        out.append(str(e))
    return out


def load_blocks(args):
    if args.cache is not None:
        blocks = cache_read(args.cache)
        if not blocks:
            raise IngestError(f"cache {args.cache} holds no blocks")
        return blocks
    if args.endpoint is not None:
        return fetch_range(args.endpoint, BlockRange(args.start, args.end))
    return synth_blocks(args.seed, args.synthetic, txs_per_block=args.txs_per_block, pool_size=args.pool_size)


def load_task(args):
    blocks = load_blocks(args)
    graph = build_transaction_graph(blocks, directed=False)
    if graph.n_nodes < 2:
        where = f"cache {args.cache}" if args.cache is not None else "block source"
        raise IngestError(f"{where} yields a graph with {graph.n_nodes} nodes; need at least 2")
    return node_task(graph, normalize=not args.no_normalize, split_seed=args.seed)


def _spec(args, in_dim: int) -> ModelSpec:
    return ModelSpec(args.model, in_dim, hidden=args.hidden, n_layers=args.layers, activation=args.activation,
                     sage_k=args.sage_k, sage_pooling=args.sage_pooling, sampler_seed=args.seed)


def _check(problems) -> None:
    if problems:
        raise ConfigError(problems)


# -- subcommands


def cmd_fetch(args) -> int:
    endpoint = resolve_endpoint(args.endpoint)
    problems = []
    if not endpoint:
        problems.append(f"no endpoint: pass --endpoint or set {ENDPOINT_ENV_VAR}")
    if args.start < 0 or args.start > args.end:
        problems.append("need 0 <= --start <= --end")
    if args.parallelism < 1:
        problems.append("--parallelism must be >= 1")
    if args.timeout <= 0:
        problems.append("--timeout must be > 0")
    _check(problems)
    blocks = fetch_range(RpcClient(endpoint, timeout=args.timeout), BlockRange(args.start, args.end),
                         parallelism=args.parallelism)
    cache_write(args.cache, blocks)
    out = args.out if args.out is not None else args.cache.parent
    cfg = run_config(args)
    cfg["endpoint"] = endpoint
    write_run_config(out, cfg, [args.cache.name])
    log.info("wrote %d blocks to %s", len(blocks), args.cache)
    return EXIT_OK


def cmd_graph(args) -> int:
    _check(_source_problems(args))
    blocks = load_blocks(args)
    graph = build_transaction_graph(blocks, directed=args.directed, weight=args.weight)
    if graph.n_nodes == 0:
        where = f"cache {args.cache}" if args.cache is not None else "block source"
        raise IngestError(f"{where} contains no transfers; graph is empty")
    out = args.out
    write_graph_text(out / "graph.txt", graph.adj, graph.features)
    write_edges_ndjson(out / "edges.ndjson", graph.adj, graph.index)
    labels = activity_labels(graph)
    rows = [(i, graph.index.address_of(i), int(labels[i]), *graph.raw_features[i]) for i in range(graph.n_nodes)]
    write_csv(out / "nodes.csv", ("node", "address", "label", *FEATURE_COLUMNS), rows)
    write_run_config(out, run_config(args), ["graph.txt", "edges.ndjson", "nodes.csv"])
    log.info("graph: %d nodes, %d edges", graph.n_nodes, graph.adj.nnz)
    return EXIT_OK


def cmd_train(args) -> int:
    problems = _source_problems(args) + _model_problems(args)
    if args.epochs < 0:
        problems.append("--epochs must be >= 0")
    _check(problems)
    task = load_task(args)
    spec = _spec(args, task.in_dim)
    res = train_node_classifier(spec, task.adj, task.x, task.labels, task.train_mask, task.test_mask,
                                epochs=args.epochs, lr=args.lr, optimizer=args.optimizer, seed=args.seed)
    out = args.out
    write_csv(out / "train_loss.csv", ("epoch", "loss", "accuracy"), res.csv_rows())
    res.model.save(out / "model.json")
    fp = write_run_config(out, run_config(args), ["train_loss.csv", "model.json", "summary.json"])
    write_json(out / "summary.json", {"test_accuracy": res.test_accuracy, "nodes": task.n_nodes,
                                      "edges": task.adj.nnz, "fingerprint": fp})
    log.info("test accuracy %.4f", res.test_accuracy)
    return EXIT_OK


def cmd_gas_opt(args) -> int:
    problems = []
    try:
        env_cfg = GasEnvConfig(n_pending=args.n_pending, t_per_tx=args.t_per_tx, g_per_tx=args.g_per_tx,
                               increment=args.increment, max_gas_limit=args.max_gas, overhead=args.overhead,
                               penalty=args.penalty, arrival=args.arrival, congestion_mode=args.congestion_mode,
                               horizon=args.horizon)
    except ValueError as e:
        problems += str(e).split("; ")
    try:
        hp = RlHyper(alpha=args.alpha, gamma=args.gamma, epsilon=args.epsilon, epsilon_decay=args.epsilon_decay,
                     epsilon_floor=args.epsilon_floor)
    except ValueError as e:
        problems += str(e).split("; ")
    if args.episodes < 0:
        problems.append("--episodes must be >= 0")
    target = args.t_per_tx * args.n_pending if args.target_time is None else args.target_time
    try:
        alg1 = Algorithm1Config(args.start_gas, args.alg1_increment, args.max_gas, target,
                                args.congestion_threshold, args.max_iterations)
    except ValueError as e:
        problems += str(e).split("; ")
    _check(problems)

    exp = run_gas_rl_experiment(env_cfg, hp, args.episodes, seed=args.seed)
    model = GasModel(args.n_pending, args.t_per_tx, args.start_gas, args.g_per_tx, args.overhead, args.penalty)
    final_gas, trace = algorithm1_optimize(alg1, model)
    out = args.out
    write_csv(out / "gas_rl.csv", EXPERIMENT_COLUMNS, exp.rows)
    write_csv(out / "gas_episodes.csv", ("episode", "return", "epsilon"),
              [(e, r, eps) for e, (r, eps) in enumerate(zip(exp.returns, exp.epsilons))])
    write_csv(out / "alg1_trace.csv", ALG1_COLUMNS,
              [(s.iteration, s.gas_limit, s.expected_time, s.congestion) for s in trace])
    fp = write_run_config(out, run_config(args), ["gas_rl.csv", "gas_episodes.csv", "alg1_trace.csv",
                                                  "summary.json"])
    tp = exp.throughputs
    write_json(out / "summary.json", {
        "optimum_throughput": exp.optimum_throughput(),
        "final_quartile_mean_throughput": float(exp.quartile(3).mean()) if tp.size else None,
        "first_quartile_var": float(exp.quartile(0).var()) if tp.size else None,
        "final_quartile_var": float(exp.quartile(3).var()) if tp.size else None,
        "alg1_final_gas_limit": final_gas, "alg1_iterations": len(trace), "fingerprint": fp})
    return EXIT_OK


def cmd_gatrl(args) -> int:
    problems = _source_problems(args) + _model_problems(args)
    if args.epochs < 0:
        problems.append("--epochs must be >= 0")
    if args.horizon < 1:
        problems.append("--horizon must be >= 1")
    if not args.ppo_lr > 0:
        problems.append("--ppo-lr must be > 0")
    if args.compare and args.no_ppo:
        problems.append("--compare and --no-ppo are mutually exclusive")
    _check(problems)
    task = load_task(args)
    spec = _spec(args, task.in_dim)
    kw = dict(lr=args.lr, horizon=args.horizon, ppo_lr=args.ppo_lr)
    out = args.out
    artifacts = ["gatrl_loss.csv", "ppo_trace.csv", "summary.json"]
    res = train_combined(task, spec, args.epochs, args.seed, ppo=not args.no_ppo, **kw)
    write_csv(out / "gatrl_loss.csv", ("epoch", "gat_loss", "ppo_loss"), res.trace.csv_rows())
    write_csv(out / "ppo_trace.csv", ("epoch", "ppo_loss", "value_loss", "entropy"), res.trace.ppo_rows())
    summary = {"gatrl_test_accuracy": res.test_accuracy, "allocation": res.allocation.tolist()}
    if args.compare:
        cmp = compare_gat_vs_gatrl(task, spec, args.epochs, args.seed, **kw)
        write_csv(out / "comparison.csv", ("epoch", "gat_loss", "gatrl_loss", "ppo_loss"), cmp.csv_rows())
        summary.update(cmp.summary())
        artifacts.append("comparison.csv")
    summary["fingerprint"] = write_run_config(out, run_config(args), artifacts)
    write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_bench(args) -> int:
    problems = _source_problems(args, required=False)
    cfg = BenchConfig(models=tuple(args.models), blocks=tuple(args.blocks), epochs=args.epochs, hidden=args.hidden,
                      sage_k=args.sage_k, lr=args.lr, seed=args.seed, txs_per_block=args.txs_per_block,
                      pool_size=args.pool_size)
    problems += cfg.problems()
    _check(problems)
    blocks = None
    if args.cache is not None or args.endpoint is not None or args.synthetic is not None:
        blocks = load_blocks(args)
        if len(blocks) < max(cfg.blocks):
            raise ConfigError([f"block source has {len(blocks)} blocks; --blocks needs {max(cfg.blocks)}"])
    rows = run_bench(cfg, blocks)
    write_csv(args.out / "bench.csv", BENCH_COLUMNS, [r.as_tuple() for r in rows])
    write_run_config(args.out, run_config(args), ["bench.csv"])
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        for p in e.problems:
            print(f"ethgatrl {args.command}: error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, TrainingDiverged, FloatingPointError, OSError, ValueError) as e:
        print(f"ethgatrl {args.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
