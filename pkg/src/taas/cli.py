"""Command-line entry points.

    taas sim      deterministic simulated run, report to stdout / JSON file
    taas run      live run over loopback sockets (launches the cluster)
    taas sweep    simulated scaling sweep over cluster sizes
    taas node     run one transaction-node server from a cluster config
    taas storage  run one storage-node server from a cluster config

Workload names: ycsb (95/5), ycsb-hc (50/50), ycsb-ro (read only),
transfer (account transfers with conserved total), composite (multi-model
sub-transactions sharing one id). Fault scenario files are the timed-event
format documented in taas.sim.
"""

import argparse
import json
import sys

from .exchange import CONSISTENCY_NAMES, ISOLATION_NAMES, load_config
from .model import ConsistencyMode, IsolationLevel
from . import bench
from . import workload as wl


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--workload",
        default="ycsb",
        choices=["ycsb", "ycsb-hc", "ycsb-ro", "transfer", "composite"],
    )
    p.add_argument("--txns", type=int, default=10_000)
    p.add_argument("--clients", type=int, default=30)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--keys", type=int, default=10_000)
    p.add_argument("--accounts", type=int, default=1_000)
    p.add_argument("--ops-per-txn", type=int, default=10)
    p.add_argument("--zipf", type=float, default=0.99)
    p.add_argument("--isolation", default="si", choices=sorted(ISOLATION_NAMES))
    p.add_argument(
        "--consistency", default="strong", choices=sorted(CONSISTENCY_NAMES)
    )


def _spec_from_args(args) -> wl.WorkloadSpec:
    return wl.make_spec(
        args.workload,
        txn_count=args.txns,
        clients=args.clients,
        seed=args.seed,
        keys=args.keys,
        accounts=args.accounts,
        ops_per_txn=args.ops_per_txn,
        zipf_theta=args.zipf,
        isolation=ISOLATION_NAMES[args.isolation],
        consistency=CONSISTENCY_NAMES[args.consistency],
    )


def _emit(report, out_path: str | None) -> None:
    sys.stdout.write(report.to_text())
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def cmd_sim(args) -> int:
    spec = _spec_from_args(args)
    faults = None
    if args.faults:
        from .sim import parse_scenario

        with open(args.faults, "r", encoding="utf-8") as fh:
            faults = parse_scenario(fh.read())
    report = bench.run_sim(
        args.taas_nodes,
        args.storage_nodes,
        spec,
        faults=faults,
        epoch_us=int(args.epoch_ms * 1000),
        pipelined=not args.no_pipeline,
    )
    _emit(report, args.out)
    return 0


def cmd_run(args) -> int:
    from .net import local_config

    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = local_config(
            args.taas_nodes, args.storage_nodes, epoch_us=int(args.epoch_ms * 1000)
        )
    spec = _spec_from_args(args)
    report = bench.run_live(cfg, spec)
    _emit(report, args.out)
    return 0


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    reports = bench.scaling_sweep(
        args.max_taas,
        spec,
        seeds=seeds,
        storage_nodes=args.storage_nodes,
        epoch_us=int(args.epoch_ms * 1000),
    )
    sys.stdout.write(bench.sweep_table(reports))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                [r.to_json_dict() for r in reports], fh, indent=2, sort_keys=True
            )
            fh.write("\n")
    return 0


def cmd_node(args) -> int:
    import time

    from dataclasses import replace

    from .net import NodeServer

    cfg = load_config(args.config)
    if args.epoch_ms:
        cfg = replace(cfg, epoch_interval_us=int(args.epoch_ms * 1000))
    if args.isolation_default:
        cfg = replace(cfg, isolation_default=ISOLATION_NAMES[args.isolation_default])
    cfg = replace(cfg, durable=args.durable == "on")
    server = NodeServer(args.node_id, cfg, data_dir=args.data_dir)
    server.start(recover=args.recover)
    print(f"taas node {args.node_id} serving on "
          f"{cfg.taas_addresses[args.node_id]}", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_storage(args) -> int:
    import time

    from .net import StorageServer
    from .storage import ShardRange

    cfg = load_config(args.config)
    shard = ShardRange.parse(args.shard_range) if args.shard_range else None
    server = StorageServer(
        args.storage_id,
        cfg,
        shard=shard,
        cache_bytes=int(args.cache_mb * 1024 * 1024),
        persist_path=args.data_file if args.persist == "on" else None,
    )
    if args.meta:
        for item in args.meta:
            name, _, path = item.partition("=")
            with open(path, "rb") as fh:
                server.adaptor.register_meta(name, fh.read())
    print(f"storage node {args.storage_id} serving on "
          f"{cfg.storage_addresses[args.storage_id]}", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taas", description="transaction service cluster tools"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="deterministic simulated run")
    p_sim.add_argument("--taas-nodes", type=int, default=3)
    p_sim.add_argument("--storage-nodes", type=int, default=1)
    p_sim.add_argument("--epoch-ms", type=float, default=10.0)
    p_sim.add_argument("--faults", help="fault scenario file")
    p_sim.add_argument("--no-pipeline", action="store_true")
    p_sim.add_argument("--out", help="write JSON report here")
    _add_workload_args(p_sim)
    p_sim.set_defaults(fn=cmd_sim)

    p_run = sub.add_parser("run", help="live run over loopback sockets")
    p_run.add_argument("--config", help="cluster config file (JSON)")
    p_run.add_argument("--taas-nodes", type=int, default=3)
    p_run.add_argument("--storage-nodes", type=int, default=1)
    p_run.add_argument("--epoch-ms", type=float, default=10.0)
    p_run.add_argument("--out")
    _add_workload_args(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="simulated scaling sweep")
    p_sweep.add_argument("--max-taas", type=int, default=3)
    p_sweep.add_argument("--storage-nodes", type=int, default=1)
    p_sweep.add_argument("--epoch-ms", type=float, default=10.0)
    p_sweep.add_argument("--seeds", default="1,2,3")
    p_sweep.add_argument("--out")
    _add_workload_args(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_node = sub.add_parser("node", help="run one transaction node")
    p_node.add_argument("--node-id", type=int, required=True)
    p_node.add_argument("--config", required=True)
    p_node.add_argument("--epoch-ms", type=float)
    p_node.add_argument("--isolation-default", choices=sorted(ISOLATION_NAMES))
    p_node.add_argument("--data-dir")
    p_node.add_argument("--durable", choices=["on", "off"], default="off")
    p_node.add_argument("--recover", action="store_true")
    p_node.set_defaults(fn=cmd_node)

    p_storage = sub.add_parser("storage", help="run one storage node")
    p_storage.add_argument("--storage-id", type=int, default=0)
    p_storage.add_argument("--config", required=True)
    p_storage.add_argument("--shard-range", help='key range "start:end"')
    p_storage.add_argument("--cache-mb", type=float, default=0.0)
    p_storage.add_argument("--persist", choices=["on", "off"], default="off")
    p_storage.add_argument("--data-file")
    p_storage.add_argument(
        "--meta", action="append", help="name=path metadata blob to register"
    )
    p_storage.set_defaults(fn=cmd_storage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
