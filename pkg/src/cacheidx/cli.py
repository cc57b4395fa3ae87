"""``cacheidx`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import ExperimentError, Workload, emit_answers, emit_csv, run_experiment, verify_engines
from .cluster.runtime import BatchingPolicy, ClusterError, run_master, run_replicated, run_slave
from .cluster.transport import accept, connect, listen, parse_endpoint
from .config import ConfigError, Settings, load_settings, parse_int_size
from .engines import EngineKind, make_engine
from .index import IndexBuildError, build_nary_tree, build_sorted_index, partition_index, read_snapshot, write_snapshot
from .model import ModelError, ScalingAssumptions, evaluate, project
from .workload import ExperimentSpec, WorkloadSpec, gen_index_keys, gen_keys

log = logging.getLogger("cacheidx")


class UsageError(Exception):
    pass


def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(parse_int_size(t) for t in text.split(",") if t.strip())
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _methods(text: str) -> tuple[EngineKind, ...]:
    try:
        return tuple(EngineKind.parse(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _workload_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=lambda s: int(s, 0), help="workload seed (64-bit)")
    p.add_argument("--keys", type=parse_int_size, help="number of query keys")
    p.add_argument("--index-keys", type=parse_int_size, help="number of distinct index keys")


def _config_flag(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--config", action="append", default=[], required=required, metavar="FILE",
                   help="INI config file (repeatable; later files override earlier ones)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacheidx", description="Cache-resident index lookups and their cost model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("build", help="generate an index and write a snapshot")
    _config_flag(p)
    _workload_flags(p)
    p.add_argument("--out", required=True, type=Path, help="snapshot path")

    p = sub.add_parser("run", help="batch-size sweep across methods, CSV output")
    _config_flag(p)
    _workload_flags(p)
    p.add_argument("--methods", type=_methods)
    p.add_argument("--batch-bytes", type=_sizes, help="comma separated sweep, e.g. 8K,64K,1M")
    p.add_argument("--nodes", type=int, help="master plus slaves for C methods")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--normalize", type=int, help="divisor applied to A/B times")
    p.add_argument("--transport", choices=("loopback", "tcp"))
    p.add_argument("--replicate-local", action="store_true",
                   help="run A/B behind a round-robin balancer instead of on one node")
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")

    p = sub.add_parser("serve", help="run one master or slave process over TCP")
    _config_flag(p)
    _workload_flags(p)
    p.add_argument("--role", required=True, choices=("master", "slave"))
    p.add_argument("--snapshot", type=Path, help="index snapshot (default: generate from the workload)")
    p.add_argument("--kind", type=EngineKind.parse, help="slave engine (A, B, C1, C2, C3)")
    p.add_argument("--partition", type=int, default=0, help="slave: partition served")
    p.add_argument("--parts", type=int, help="slave: number of partitions")
    p.add_argument("--listen", help="slave: host:port (port 0 picks a free one)")
    p.add_argument("--masters", type=int, default=1, help="slave: number of masters that will connect")
    p.add_argument("--peers", help="master: comma separated slave endpoints, in partition order")
    p.add_argument("--mode", choices=("partitioned", "replicated"), default="partitioned",
                   help="master: delimiter dispatch or round-robin over full replicas")
    p.add_argument("--batch-bytes", type=parse_int_size)
    p.add_argument("--answers", type=Path, help="master: write key,rank CSV here")

    for name, help_text in (("model", "evaluate the A/B/C cost model"), ("project", "future-trend projection")):
        p = sub.add_parser(name, help=help_text)
        _config_flag(p)
        p.add_argument("--profile", type=Path, help="config file holding [profile]")
        p.add_argument("--shape", type=Path, help="config file holding [shape]")
        p.add_argument("--keys", type=parse_int_size, default=1 << 23)
        p.add_argument("--normalize", type=int, default=11)
        p.add_argument("--batch-bytes", type=parse_int_size, default=128 * 1024)
        if name == "project":
            p.add_argument("--years", type=int, default=5)
            p.add_argument("--cpu-doubling-months", type=float)
            p.add_argument("--network-doubling-months", type=float)
            p.add_argument("--memory-bw-growth", type=float)
            p.add_argument("--l1-penalty-tracks-cpu", action="store_true")

    p = sub.add_parser("verify", help="check every method against the oracle")
    _config_flag(p)
    _workload_flags(p)
    p.add_argument("--queries", type=parse_int_size, dest="keys", help="alias of --keys")
    p.add_argument("--slaves", type=int, default=4)
    p.add_argument("--transport", choices=("loopback", "tcp"), default="loopback")
    p.add_argument("--batch-bytes", type=parse_int_size, default=128 * 1024)
    return parser


def _settings(args) -> Settings:
    paths = list(args.config)
    for extra in ("profile", "shape"):
        if getattr(args, extra, None):
            paths.append(getattr(args, extra))
    s = load_settings(*paths) if paths else Settings()
    w = s.workload
    w = WorkloadSpec(seed=w.seed if getattr(args, "seed", None) is None else args.seed,
                     key_count=w.key_count if getattr(args, "keys", None) is None else args.keys,
                     index_key_count=(w.index_key_count if getattr(args, "index_keys", None) is None
                                      else args.index_keys))
    return s.replace(workload=w)


def _load_index(args, s: Settings):
    if getattr(args, "snapshot", None):
        return read_snapshot(args.snapshot)
    return build_sorted_index(gen_index_keys(s.workload))


def cmd_build(args) -> int:
    s = _settings(args)
    index = build_sorted_index(gen_index_keys(s.workload))
    write_snapshot(args.out, index)
    tree = build_nary_tree(index)
    print(f"wrote {len(index)} keys to {args.out}; tree levels {tree.level_sizes}, {tree.tree_bytes} bytes")
    return 0


def cmd_run(args) -> int:
    s = _settings(args)
    e = s.experiment
    spec = ExperimentSpec(methods=args.methods or e.methods,
                          batch_bytes_list=args.batch_bytes or e.batch_bytes_list,
                          nodes=args.nodes or e.nodes,
                          repetitions=args.repetitions or e.repetitions,
                          normalize_divisor=args.normalize or e.normalize_divisor)
    if args.transport:
        s = s.replace(transport=args.transport)
    rows = run_experiment(spec, s.workload, s, replicate_local=args.replicate_local)
    data = emit_csv(rows)
    if args.out:
        args.out.write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    return 0


def cmd_serve(args) -> int:
    s = _settings(args)
    index = _load_index(args, s)
    if args.role == "slave":
        kind = args.kind or s.engine_kind
        parts = args.parts or (1 if kind in (EngineKind.A, EngineKind.B) else s.slaves)
        table, partitions = partition_index(index, parts)
        part = partitions[args.partition]
        engine = make_engine(kind, part.index, rank_offset=part.rank_offset, geometry=s.geometry)
        host, port = parse_endpoint(args.listen or s.listen or "127.0.0.1:0")
        server = listen(host, port)
        bound = server.getsockname()
        print(f"LISTENING {bound[0]}:{bound[1]}", flush=True)
        try:
            channels = [accept(server) for _ in range(args.masters)]
        finally:
            server.close()
        key_range = (int(table.delimiters[args.partition]), int(table.delimiters[args.partition + 1]))
        stats = run_slave(channels, engine, node_id=args.partition + 1,
                          key_range=None if parts == 1 else key_range)
        log.info("slave %d: %d batches, %d keys, idle %.1f%%, %d routing anomalies", stats.node_id,
                 stats.batches, stats.keys, 100 * stats.idle_fraction, stats.routing_anomalies)
        return 0

    peers = [t.strip() for t in args.peers.split(",")] if args.peers else list(s.peers)
    if not peers:
        raise UsageError("serve --role master needs --peers or transport.peers")
    policy = BatchingPolicy(args.batch_bytes or s.policy.batch_bytes, s.policy.flush_timeout)
    queries = gen_keys(s.workload)
    channels = [connect(*parse_endpoint(p)) for p in peers]
    chunks = (queries[i: i + policy.batch_keys] for i in range(0, len(queries), policy.batch_keys))
    out = []
    sink = lambda seq, ranks: out.append(ranks)  # noqa: E731
    if args.mode == "replicated":
        stats = run_replicated(channels, chunks, sink, policy=policy, window=s.window, names=peers)
    else:
        table, _ = partition_index(index, len(peers))
        stats = run_master(channels, table, chunks, sink, policy=policy, window=s.window, names=peers)
    ranks = np.concatenate(out) if out else np.empty(0, dtype=np.uint64)
    if args.answers:
        args.answers.write_bytes(emit_answers(queries, ranks))
    print(f"master: {stats.keys_in} keys in, {stats.keys_answered} answered, "
          f"{stats.batches_sent} batches, {stats.elapsed_s:.3f} s")
    return 0


def _model_inputs(args):
    s = _settings(args)
    if s.profile is None or s.shape is None:
        missing = " and ".join(n for n, v in (("[profile]", s.profile), ("[shape]", s.shape)) if v is None)
        raise UsageError(f"model needs {missing}; pass --profile/--shape or --config")
    return s


def cmd_model(args) -> int:
    s = _model_inputs(args)
    rows = evaluate(s.profile, s.shape, total_keys=args.keys, batch_bytes=args.batch_bytes,
                    normalize=args.normalize)
    for r in rows:
        print(f"{r.method:<3} {r.normalized_s:.6f} s  ({r.per_key_ns:.3f} ns/key)")
    return 0


def cmd_project(args) -> int:
    s = _model_inputs(args)
    sc = s.scaling
    scaling = ScalingAssumptions(
        cpu_doubling_months=args.cpu_doubling_months or sc.cpu_doubling_months,
        network_doubling_months=args.network_doubling_months or sc.network_doubling_months,
        memory_bw_growth_per_year=(sc.memory_bw_growth_per_year if args.memory_bw_growth is None
                                   else args.memory_bw_growth),
        memory_latency_growth=sc.memory_latency_growth,
        l1_penalty_tracks_cpu=args.l1_penalty_tracks_cpu or sc.l1_penalty_tracks_cpu)
    rows = project(s.profile, s.shape, args.years, scaling, total_keys=args.keys,
                   batch_bytes=args.batch_bytes, normalize=args.normalize)
    print("year,A_s,B_s,C3_s,B_over_C3")
    by_year: dict[int, dict[str, float]] = {}
    ratio = {}
    for r in rows:
        by_year.setdefault(r.year, {})[r.method] = r.normalized_s
        ratio[r.year] = r.ratio_b_over_c3
    for year, vals in sorted(by_year.items()):
        print(f"{year},{vals['A']:.6f},{vals['B']:.6f},{vals['C3']:.6f},{ratio[year]:.4f}")
    return 0


def cmd_verify(args) -> int:
    s = _settings(args)
    outcome = verify_engines(Workload.generate(s.workload), slaves=args.slaves,
                             batch_bytes=args.batch_bytes, transport=args.transport)
    for method, ok in outcome.items():
        print(f"{method:<3} {'ok' if ok else 'MISMATCH'}")
    return 0 if all(outcome.values()) else 1


COMMANDS = {"build": cmd_build, "run": cmd_run, "serve": cmd_serve, "model": cmd_model,
            "project": cmd_project, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "run" and not args.config:
            raise UsageError("run needs --config FILE")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"cacheidx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ClusterError, ExperimentError, IndexBuildError, ModelError, OSError, ValueError) as exc:
        print(f"cacheidx {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
