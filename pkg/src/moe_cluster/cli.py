"""Command-line entry point: ``moe-cluster <subcommand> ...``.

Reports go to stdout as CSV with a header row, or as JSON lines with
``--jsonl``. Diagnostics go to stderr. Exit status is 0 on success, 2 for
usage and configuration errors and 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from . import perfmodel, placement, wiring
from .config import ConfigError, load_config
from .model import init_weights
from .runtime import MODES, SIM, TCP
from .weightfile import PRESTACKED, UNSTACKED, pack_weights, save_unstacked

log = logging.getLogger("moe_cluster")


class UsageError(Exception):
    pass


def emit(rows: Iterable[dict], columns: Sequence[str], jsonl: bool, out) -> None:
    rows = list(rows)
    if jsonl:
        for row in rows:
            out.write(json.dumps({c: row[c] for c in columns}) + "\n")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    out.write(buf.getvalue())


def _prompt(spec: str | None, default: Sequence[int], vocab: int) -> list[int]:
    """``--prompt-tokens`` is either a count (tokens 1..P) or a comma-separated id list."""
    if spec is None:
        return list(default)
    try:
        if "," in spec:
            tokens = [int(t) for t in spec.split(",")]
        else:
            tokens = [(i % (vocab - 1)) + 1 for i in range(int(spec))]
    except ValueError:
        raise UsageError(f"--prompt-tokens must be a count or comma-separated ids, got {spec!r}") from None
    if not tokens or any(not 0 <= t < vocab for t in tokens):
        raise UsageError(f"prompt needs at least one token id in [0, {vocab})")
    return tokens


# -- subcommands ---------------------------------------------------------------


def cmd_run_cluster(args, out) -> int:
    from .runtime import run_cluster

    run = load_config(args.config)
    cfg = run.cluster_config(
        n_nodes=args.nodes,
        mode=args.mode,
        strategy=args.strategy,
        transport=args.transport,
        replication=args.replication,
        idle_before_s=args.idle_before,
    )
    prompt = _prompt(args.prompt_tokens, run.prompt, cfg.model.vocab_size)
    n_out = run.gen_tokens if args.gen_tokens is None else args.gen_tokens
    if n_out < 1:
        raise UsageError("--gen-tokens must be at least 1")
    result = run_cluster(cfg, prompt, n_out)
    rows = [
        {"token": s.index, "token_id": s.token, "moe_s": s.moe_s, "comm_s": s.comm_s, "misc_s": s.misc_s}
        for s in result.steps
    ]
    columns = ["token", "moe_s", "comm_s", "misc_s"] + (["token_id"] if args.with_ids else [])
    emit(rows, columns, args.jsonl, out)
    print(
        f"nodes={cfg.n_nodes} mode={cfg.mode} strategy={cfg.strategy} transport={cfg.transport} "
        f"tokens={result.tokens} mean_step_s={result.mean_step_s:.6f} comm_share={result.mean_comm_share:.3f}",
        file=sys.stderr,
    )
    return 0


def cmd_bench_packing(args, out) -> int:
    strategies = [UNSTACKED, PRESTACKED] if args.strategy == "both" else [args.strategy]
    params = wiring.WiringParams(inactivity_threshold=args.theta)
    rows = []
    for strategy in strategies:
        for s in wiring.bench_packing(
            strategy, args.t_wait_ms, n_layers=args.layers, n_samples=args.samples, n=args.n, params=params
        ):
            rows.append(
                {"strategy": s.strategy, "T_wait_ms": s.t_wait_ms, "mean_sample_time_ms": round(s.mean_sample_time_ms, 6)}
            )
    emit(rows, ["strategy", "T_wait_ms", "mean_sample_time_ms"], args.jsonl, out)
    return 0


def cmd_predict(args, out) -> int:
    nics = perfmodel.load_nics()
    nic = nics[args.nic]
    expected = perfmodel.default_expected_experts()
    if args.E is not None:
        expected = {n: args.E for n in args.nodes}
    missing = [n for n in args.nodes if n not in expected]
    if missing:
        raise UsageError(f"no expected-experts value for {missing} nodes; pass --E")
    rows = [perfmodel.table_row(r) for r in perfmodel.sweep_nodes(args.nodes, expected, nic=nic)]
    emit(rows, perfmodel.TABLE_COLUMNS, args.jsonl, out)
    return 0


def cmd_cost(args, out) -> int:
    specs = perfmodel.load_cost_specs(args.spec)
    rows = [
        {
            "solution": c.label,
            "nodes": c.n_nodes,
            "price_per_node_usd": c.price_per_node,
            "throughput_tps": c.throughput,
            "tp_per_usd": f"{perfmodel.cost_efficiency(c):.6f}",
        }
        for c in specs
    ]
    emit(rows, ["solution", "nodes", "price_per_node_usd", "throughput_tps", "tp_per_usd"], args.jsonl, out)
    return 0


def cmd_pack_weights(args, out) -> int:
    src = args.unstacked
    if args.generate:
        run = load_config(args.config)
        weights = init_weights(run.model, run.seed)
        src = src or tempfile.mkdtemp(prefix="moew-")
        save_unstacked(weights.experts, src)
    if src is None:
        raise UsageError("pass --unstacked DIR (or --generate to write one from the config)")
    path = pack_weights(src, args.out)
    emit([{"unstacked": str(src), "prestacked": str(path), "bytes": Path(path).stat().st_size}],
         ["unstacked", "prestacked", "bytes"], args.jsonl, out)
    return 0


def cmd_oracle(args, out) -> int:
    plan = placement.build_shard_plan(args.experts, args.nodes, args.replication)
    e = placement.expected_executed_experts(args.nodes, args.experts, args.topk, plan)
    selections = math.comb(args.experts, args.topk)  # reported over all selections, not in lowest terms
    rows = [{
        "nodes": args.nodes, "experts": args.experts, "topk": args.topk, "replication": args.replication,
        "numerator": int(e * selections), "denominator": selections, "expected": f"{float(e):.4f}",
    }]
    emit(rows, ["nodes", "experts", "topk", "replication", "numerator", "denominator", "expected"], args.jsonl, out)
    return 0


# -- parser --------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [_positive_int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-cluster", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--jsonl", action="store_true", help="emit JSON lines instead of CSV")
        return p

    p = add("run-cluster", "run a cluster in this process and report per-token time breakdown")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--nodes", type=_positive_int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--strategy", choices=placement.STRATEGIES)
    p.add_argument("--transport", choices=(SIM, TCP))
    p.add_argument("--replication", type=_positive_int)
    p.add_argument("--prompt-tokens", help="prompt length, or comma-separated token ids")
    p.add_argument("--gen-tokens", type=int)
    p.add_argument("--idle-before", type=float, help="simulated idle seconds before the request")
    p.add_argument("--local", action="store_true", help="launch every node in this process (the default)")
    p.add_argument("--with-ids", action="store_true", help="add the generated token id column")
    p.set_defaults(func=cmd_run_cluster)

    p = add("bench-packing", "replay the weight-packing benchmark on the residency simulator")
    p.add_argument("--strategy", choices=(UNSTACKED, PRESTACKED, "both"), default="both")
    p.add_argument("--t-wait-ms", type=_float_list, default=list(wiring.DEFAULT_T_WAITS_MS))
    p.add_argument("--layers", type=_positive_int, default=40)
    p.add_argument("--samples", type=_positive_int, default=5)
    p.add_argument("--n", type=_positive_int, default=8192, help="matrix side length")
    p.add_argument("--theta", type=float, default=wiring.WiringParams().inactivity_threshold)
    p.set_defaults(func=cmd_bench_packing)

    p = add("predict", "performance-model bound per token")
    p.add_argument("--nodes", type=_int_list, default=[2])
    p.add_argument("--nic", choices=sorted(perfmodel.load_nics()), default="10gbe")
    p.add_argument("--E", type=float, help="expected executed experts per node per layer")
    p.set_defaults(func=cmd_predict)

    p = add("cost", "throughput per hardware dollar")
    p.add_argument("--spec", help="JSON list of {solution, n_nodes, price_per_node, throughput}")
    p.set_defaults(func=cmd_cost)

    p = add("pack-weights", "prestack per-matrix weight files into one file")
    p.add_argument("--unstacked", help="directory of per-matrix files")
    p.add_argument("--out", required=True, help="prestacked output file")
    p.add_argument("--generate", action="store_true", help="first write seeded unstacked weights")
    p.add_argument("--config", help="JSON run configuration (model and seed for --generate)")
    p.set_defaults(func=cmd_pack_weights)

    p = add("oracle", "exact expected executed experts per node per layer")
    p.add_argument("--nodes", type=_positive_int, required=True)
    p.add_argument("--experts", type=_positive_int, default=16)
    p.add_argument("--topk", type=_positive_int, default=4)
    p.add_argument("--replication", type=_positive_int, default=1)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args, out)
    except (UsageError, ConfigError, placement.PlacementError) as exc:
        print(f"moe-cluster {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"moe-cluster {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
