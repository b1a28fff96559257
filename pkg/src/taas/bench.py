"""Benchmark harness: deterministic simulated runs, reports, scaling sweeps.

A run seeds the keyspace through ordinary transactions, then drives closed-
loop clients (one outstanding transaction each) against the cluster, and
finally drains merges and storage pushes before collecting digests. In sim
mode every quantity in the report derives from virtual time and seeded
generators, so the rendered report is byte-identical across repeats.
"""

import json
import random
from dataclasses import dataclass, field

from .client import CompositeTxn, RandomRouter, TxnIdAllocator, TxnSession
from .exchange import ClusterConfig
from .model import AbortReason, ConsistencyMode, Decision, IsolationLevel
from .sim import FaultEvent, SimCluster, SimParams
from .storage import ShardRange
from .wire import PostTxn, VerdictMessage
from . import workload as wl

SEED_CLIENT_ORIGIN = 10_000
CLIENT_ORIGIN_BASE = 20_000


def shard_ranges(n: int) -> dict[int, ShardRange]:
    """Static byte-space range partitioning for n storage shards."""
    if n <= 1:
        return {0: ShardRange()}
    bounds = [bytes([(256 * i) // n]) for i in range(1, n)]
    ranges = {}
    for i in range(n):
        start = bounds[i - 1] if i > 0 else None
        end = bounds[i] if i < n - 1 else None
        ranges[i] = ShardRange(start=start, end=end)
    return ranges


def shard_map_blob(ranges: dict[int, ShardRange]) -> bytes:
    doc = [
        {
            "id": sid,
            "start": (r.start or b"").decode("latin1"),
            "end": (r.end or b"").decode("latin1"),
        }
        for sid, r in sorted(ranges.items())
    ]
    return json.dumps(doc).encode()


class StorageReader:
    """Client-side read router over the shard map published in metadata."""

    def __init__(self, cluster: SimCluster):
        any_adaptor = next(iter(cluster.storage.values())).adaptor
        doc = json.loads(any_adaptor.get_meta("shards"))
        self._ranges = [
            (
                entry["id"],
                ShardRange(
                    start=entry["start"].encode("latin1") or None,
                    end=entry["end"].encode("latin1") or None,
                ),
            )
            for entry in doc
        ]
        self._cluster = cluster

    def get_data(self, key: bytes):
        for sid, shard in self._ranges:
            if shard.contains(key):
                return self._cluster.storage[sid].adaptor.get_data(key)
        return None


@dataclass
class ClientMetrics:
    posted: int = 0
    committed: int = 0
    committed_ops: int = 0
    lost: int = 0
    aborted: dict[str, int] = field(default_factory=dict)
    latencies_us: list[int] = field(default_factory=list)
    committed_ids: list = field(default_factory=list)

    def record_abort(self, reason: AbortReason) -> None:
        name = reason.name.lower()
        self.aborted[name] = self.aborted.get(name, 0) + 1


class SimClient:
    """Closed-loop simulated client: post, await verdict, repeat."""

    def __init__(
        self,
        cluster: SimCluster,
        client_idx: int,
        spec: wl.WorkloadSpec,
        programs,
        metrics: ClientMetrics,
        on_done,
        origin_base: int = CLIENT_ORIGIN_BASE,
        retry_timeout_us: int | None = None,
        max_attempts: int = 10,
    ):
        self.cluster = cluster
        self.spec = spec
        self.client_idx = client_idx
        self.addr = ("client", origin_base + client_idx)
        self.alloc = TxnIdAllocator(origin=origin_base + client_idx)
        self.router = RandomRouter(
            cluster.cfg.taas_ids,
            random.Random(f"{spec.seed}/route/{origin_base + client_idx}"),
        )
        self.reader = StorageReader(cluster)
        self.programs = iter(programs)
        self.metrics = metrics
        self.on_done = on_done
        self.retry_timeout_us = (
            retry_timeout_us
            if retry_timeout_us is not None
            else 40 * cluster.cfg.epoch_interval_us
        )
        self.max_attempts = max_attempts
        self.done = False
        self.max_commit_epoch = -1
        self._payload = None
        self._program = None
        self._posted_at = 0
        self._attempts = 0
        self._last_node = None
        self._timer = None
        cluster.net.register(self.addr, self._on_message)

    def start(self, delay_us: int = 0) -> None:
        self.cluster.scheduler.schedule(delay_us, self._next_txn)

    def _next_txn(self) -> None:
        program = next(self.programs, None)
        if program is None:
            self.done = True
            self.on_done(self)
            return
        self._program = program
        txn_id = self.alloc.allocate()
        if program.labels:
            composite = CompositeTxn(
                txn_id=txn_id,
                isolation=self.spec.isolation,
                consistency=self.spec.consistency,
                source=self.reader,
            )
            wl.execute_composite_program(program, composite)
            payload = composite.build_payload()
        else:
            session = TxnSession(
                txn_id, self.reader, self.spec.isolation, self.spec.consistency
            )
            wl.execute_program(program, session)
            payload = session.build_payload()
        self._payload = payload
        self._attempts = 0
        self._posted_at = self.cluster.scheduler.now
        self.metrics.posted += 1
        self._post()

    def _post(self) -> None:
        self._attempts += 1
        node = self.router.pick(exclude=self._last_node)
        self._last_node = node
        self.cluster.net.send(self.addr, ("taas", node), PostTxn(self._payload))
        self._timer = self.cluster.scheduler.schedule(
            self.retry_timeout_us, self._on_timeout
        )

    def _on_timeout(self) -> None:
        if self._payload is None:
            return
        if self._attempts >= self.max_attempts:
            self.metrics.lost += 1
            self._payload = None
            self._next_txn()
            return
        self._post()  # identical payload, same txn id: servers deduplicate

    def _on_message(self, src, msg) -> None:
        if not isinstance(msg, VerdictMessage):
            return
        if self._payload is None or msg.txn_id != self._payload.txn_id:
            return  # stale duplicate from a retried post
        verdict = msg.verdict
        if verdict is None:
            return
        if self._timer is not None:
            self._timer.cancel()
        self.metrics.latencies_us.append(
            self.cluster.scheduler.now - self._posted_at
        )
        if verdict.decision == Decision.COMMITTED:
            self.metrics.committed += 1
            self.metrics.committed_ops += wl.op_count(self._program)
            self.metrics.committed_ids.append(msg.txn_id)
            self.max_commit_epoch = max(
                self.max_commit_epoch, verdict.commit_version.epoch
            )
        else:
            self.metrics.record_abort(verdict.reason)
        self._payload = None
        self._next_txn()


@dataclass
class RunReport:
    mode: str
    seed: int
    workload: str
    taas_nodes: int
    storage_nodes: int
    isolation: str
    consistency: str
    posted: int
    committed: int
    aborted: dict[str, int]
    lost: int
    duration_us: int
    txns_per_sec: float
    ops_per_sec: float
    latency_p50_us: int
    latency_p95_us: int
    latency_p99_us: int
    mean_op_latency_us: float
    epochs_merged: int
    log_digests: dict[int, str]
    vt_digests: dict[int, str]
    storage_digests: dict[int, str]
    digests_equal: bool

    def aborted_total(self) -> int:
        return sum(self.aborted.values())

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "workload": self.workload,
            "taas_nodes": self.taas_nodes,
            "storage_nodes": self.storage_nodes,
            "isolation": self.isolation,
            "consistency": self.consistency,
            "posted": self.posted,
            "committed": self.committed,
            "aborted": dict(sorted(self.aborted.items())),
            "lost": self.lost,
            "duration_us": self.duration_us,
            "txns_per_sec": round(self.txns_per_sec, 2),
            "ops_per_sec": round(self.ops_per_sec, 2),
            "latency_us": {
                "p50": self.latency_p50_us,
                "p95": self.latency_p95_us,
                "p99": self.latency_p99_us,
                "mean_per_op": round(self.mean_op_latency_us, 2),
            },
            "epochs_merged": self.epochs_merged,
            "log_digests": {str(k): v for k, v in sorted(self.log_digests.items())},
            "vt_digests": {str(k): v for k, v in sorted(self.vt_digests.items())},
            "storage_digests": {
                str(k): v for k, v in sorted(self.storage_digests.items())
            },
            "digests_equal": self.digests_equal,
        }

    def to_text(self) -> str:
        lines = [
            f"mode={self.mode} workload={self.workload} seed={self.seed}",
            f"cluster: taas={self.taas_nodes} storage={self.storage_nodes} "
            f"isolation={self.isolation} consistency={self.consistency}",
            f"txns: posted={self.posted} committed={self.committed} "
            f"aborted={self.aborted_total()} lost={self.lost}",
        ]
        for reason, count in sorted(self.aborted.items()):
            lines.append(f"  abort[{reason}]={count}")
        lines.extend(
            [
                f"throughput: {self.txns_per_sec:.2f} txn/s, {self.ops_per_sec:.2f} op/s "
                f"over {self.duration_us / 1e6:.3f}s",
                f"latency_us: p50={self.latency_p50_us} p95={self.latency_p95_us} "
                f"p99={self.latency_p99_us} mean_per_op={self.mean_op_latency_us:.2f}",
                f"epochs merged: {self.epochs_merged}",
                f"digests equal across nodes: {self.digests_equal}",
            ]
        )
        for n, digest in sorted(self.log_digests.items()):
            lines.append(f"  log[{n}]={digest[:16]}")
        for s, digest in sorted(self.storage_digests.items()):
            lines.append(f"  storage[{s}]={digest[:16]}")
        return "\n".join(lines) + "\n"


def _percentile(values: list[int], pct: float) -> int:
    if not values:
        return 0
    ordered = sorted(values)
    idx = min(len(ordered) - 1, int(pct * len(ordered)))
    return ordered[idx]


def build_cluster(
    taas_nodes: int,
    storage_nodes: int,
    seed: int,
    epoch_us: int = 10_000,
    pipelined: bool = True,
    params: SimParams | None = None,
    isolation: IsolationLevel = IsolationLevel.SNAPSHOT_ISOLATION,
    consistency: ConsistencyMode = ConsistencyMode.STRONG,
    data_dirs: dict[int, str] | None = None,
    durable: bool = False,
    early_validation: bool = True,
) -> SimCluster:
    cfg = ClusterConfig(
        taas_ids=tuple(range(taas_nodes)),
        storage_ids=tuple(range(storage_nodes)),
        epoch_interval_us=epoch_us,
        isolation_default=isolation,
        consistency_default=consistency,
        pipelined=pipelined,
        durable=durable,
        early_validation=early_validation,
    )
    ranges = shard_ranges(storage_nodes)
    cluster = SimCluster(
        cfg,
        params or SimParams(seed=seed),
        data_dirs=data_dirs,
        storage_shards=ranges,
    )
    blob = shard_map_blob(ranges)
    for core in cluster.storage.values():
        core.adaptor.register_meta("shards", blob)
    return cluster


def register_workload_meta(cluster: SimCluster, spec: wl.WorkloadSpec) -> None:
    descriptor = json.dumps(
        {
            "kind": spec.kind,
            "keys": spec.keys,
            "accounts": spec.accounts,
            "ops_per_txn": spec.ops_per_txn,
        }
    ).encode()
    for core in cluster.storage.values():
        core.adaptor.register_meta("ycsb.table", descriptor)


def seed_cluster(cluster: SimCluster, spec: wl.WorkloadSpec, max_time_us: int) -> None:
    """Populate the keyspace through ordinary transactions, then let storage
    catch up so workload reads observe the seeded values."""
    seed_spec = wl.WorkloadSpec(
        kind=spec.kind,
        txn_count=0,
        clients=1,
        seed=spec.seed,
        keys=spec.keys,
        accounts=spec.accounts,
        isolation=IsolationLevel.READ_COMMITTED,
        consistency=ConsistencyMode.STALE_OK,
    )
    metrics = ClientMetrics()
    done = []
    client = SimClient(
        cluster,
        client_idx=0,
        spec=seed_spec,
        programs=list(wl.seed_programs(spec)),
        metrics=metrics,
        on_done=done.append,
        origin_base=SEED_CLIENT_ORIGIN,
    )
    client.start()
    if not cluster.scheduler.run_until(lambda: bool(done), max_time_us):
        raise RuntimeError("seeding did not finish in time")
    if metrics.lost or metrics.aborted:
        raise RuntimeError(f"seeding failed: {metrics}")
    target = client.max_commit_epoch
    caught_up = lambda: all(
        core.adaptor.applied_upto() >= target for core in cluster.storage.values()
    )
    if not cluster.scheduler.run_until(caught_up, max_time_us):
        raise RuntimeError("storage did not catch up after seeding")


def run_workload(
    cluster: SimCluster,
    spec: wl.WorkloadSpec,
    faults: list[FaultEvent] | None = None,
    max_time_us: int = 600_000_000,
) -> tuple[ClientMetrics, int]:
    """Drive the workload to completion; returns metrics and duration."""
    register_workload_meta(cluster, spec)
    seed_cluster(cluster, spec, max_time_us)
    started_at = cluster.scheduler.now
    if faults:
        cluster.apply_scenario(
            [
                FaultEvent(started_at + f.time_us, f.action, f.args)
                for f in faults
            ]
        )
    metrics = ClientMetrics()
    finished = []
    clients = [
        SimClient(
            cluster,
            client_idx=i,
            spec=spec,
            programs=wl.program_stream(spec, i),
            metrics=metrics,
            on_done=finished.append,
        )
        for i in range(spec.clients)
    ]
    for i, client in enumerate(clients):
        client.start(delay_us=500 + 137 * i)
    ok = cluster.scheduler.run_until(
        lambda: len(finished) == len(clients), max_time_us
    )
    if not ok:
        raise RuntimeError(
            f"workload stalled: {len(finished)}/{len(clients)} clients finished "
            f"at t={cluster.scheduler.now}us"
        )
    duration = cluster.scheduler.now - started_at
    cluster.drain(max_time_us=cluster.scheduler.now + max_time_us)
    cluster.last_metrics = metrics
    return metrics, duration


def make_report(
    cluster: SimCluster,
    spec: wl.WorkloadSpec,
    metrics: ClientMetrics,
    duration_us: int,
    mode: str = "sim",
) -> RunReport:
    log_digests = cluster.log_chain_digests()
    vt_digests = cluster.vt_digests()
    storage_digests = cluster.storage_digests()
    duration_s = max(duration_us, 1) / 1e6
    latencies = metrics.latencies_us
    ops_total = metrics.committed_ops
    mean_lat = (
        sum(latencies) / len(latencies) / max(1, spec.ops_per_txn)
        if latencies
        else 0.0
    )
    epochs = max(
        (node.stats["merged_epochs"] for node in cluster.alive_nodes()), default=0
    )
    return RunReport(
        mode=mode,
        seed=spec.seed,
        workload=spec.kind,
        taas_nodes=len(cluster.cfg.taas_ids),
        storage_nodes=len(cluster.cfg.storage_ids),
        isolation=spec.isolation.name.lower(),
        consistency=spec.consistency.name.lower(),
        posted=metrics.posted,
        committed=metrics.committed,
        aborted=dict(metrics.aborted),
        lost=metrics.lost,
        duration_us=duration_us,
        txns_per_sec=metrics.committed / duration_s,
        ops_per_sec=ops_total / duration_s,
        latency_p50_us=_percentile(latencies, 0.50),
        latency_p95_us=_percentile(latencies, 0.95),
        latency_p99_us=_percentile(latencies, 0.99),
        mean_op_latency_us=mean_lat,
        epochs_merged=epochs,
        log_digests=log_digests,
        vt_digests=vt_digests,
        storage_digests=storage_digests,
        digests_equal=len(set(log_digests.values())) <= 1
        and len(set(vt_digests.values())) <= 1,
    )


def run_sim_cluster(
    taas_nodes: int,
    storage_nodes: int,
    spec: wl.WorkloadSpec,
    faults: list[FaultEvent] | None = None,
    epoch_us: int = 10_000,
    pipelined: bool = True,
    params: SimParams | None = None,
) -> tuple[RunReport, SimCluster]:
    cluster = build_cluster(
        taas_nodes,
        storage_nodes,
        seed=spec.seed,
        epoch_us=epoch_us,
        pipelined=pipelined,
        params=params,
        isolation=spec.isolation,
        consistency=spec.consistency,
    )
    metrics, duration = run_workload(cluster, spec, faults=faults)
    report = make_report(cluster, spec, metrics, duration)
    return report, cluster


def run_sim(
    taas_nodes: int,
    storage_nodes: int,
    spec: wl.WorkloadSpec,
    faults: list[FaultEvent] | None = None,
    epoch_us: int = 10_000,
    pipelined: bool = True,
    params: SimParams | None = None,
) -> RunReport:
    report, _ = run_sim_cluster(
        taas_nodes, storage_nodes, spec, faults, epoch_us, pipelined, params
    )
    return report


def run_live(
    cfg,
    spec: wl.WorkloadSpec,
    cluster=None,
    settle_s: float = 0.3,
) -> "RunReport":
    """Drive the workload against a socket cluster (launched here unless an
    already-running LiveCluster is passed). Wall-clock latencies."""
    import threading
    import time as _time

    from .net import LiveClient, LiveCluster

    owned = cluster is None
    if owned:
        cluster = LiveCluster(cfg)
        cluster.start()
        _time.sleep(settle_s)
    try:
        seed_client = LiveClient(cfg, origin=SEED_CLIENT_ORIGIN)
        register_blob = shard_map_blob(shard_ranges(len(cfg.storage_ids)))
        for server in cluster.storage_servers.values():
            server.adaptor.register_meta("shards", register_blob)
            server.adaptor.register_meta(
                "ycsb.table",
                json.dumps({"kind": spec.kind, "keys": spec.keys}).encode(),
            )
        last_key = None
        for program in wl.seed_programs(spec):
            session = seed_client.session(
                IsolationLevel.READ_COMMITTED, ConsistencyMode.STALE_OK
            )
            for op in program.ops:
                session.write(op[1], op[2])
                last_key = op[1]
            verdict = seed_client.commit(session)
            if verdict.decision != Decision.COMMITTED:
                raise RuntimeError(f"seeding aborted: {verdict}")
        deadline = _time.monotonic() + 30
        while last_key is not None and _time.monotonic() < deadline:
            if seed_client.get_data(last_key) is not None:
                break
            _time.sleep(0.02)
        seed_client.close()

        metrics = ClientMetrics()
        lock = threading.Lock()
        started = _time.monotonic()

        def client_main(idx: int) -> None:
            client = LiveClient(
                cfg,
                origin=CLIENT_ORIGIN_BASE + idx,
                rng=random.Random(f"{spec.seed}/route/{idx}"),
            )
            try:
                for program in wl.program_stream(spec, idx):
                    begin = _time.monotonic()
                    if program.labels:
                        composite = client.composite(spec.isolation, spec.consistency)
                        wl.execute_composite_program(program, composite)
                        try:
                            verdict = client.commit_composite(composite)
                        except TimeoutError:
                            with lock:
                                metrics.lost += 1
                            continue
                    else:
                        session = client.session(spec.isolation, spec.consistency)
                        wl.execute_program(program, session)
                        try:
                            verdict = client.commit(session)
                        except TimeoutError:
                            with lock:
                                metrics.lost += 1
                            continue
                    latency_us = int((_time.monotonic() - begin) * 1e6)
                    with lock:
                        metrics.posted += 1
                        metrics.latencies_us.append(latency_us)
                        if verdict.decision == Decision.COMMITTED:
                            metrics.committed += 1
                            metrics.committed_ops += wl.op_count(program)
                        else:
                            metrics.record_abort(verdict.reason)
            finally:
                client.close()

        threads = [
            threading.Thread(target=client_main, args=(i,), daemon=True)
            for i in range(spec.clients)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        duration_us = int((_time.monotonic() - started) * 1e6)

        # drain: wait for merges and pushes to converge across the cluster
        deadline = _time.monotonic() + 30
        while _time.monotonic() < deadline:
            applied = [
                server.node.applied_upto
                for server in cluster.node_servers.values()
            ]
            sealed = [
                server.node._last_sealed
                for server in cluster.node_servers.values()
            ]
            storage_applied = [
                server.adaptor.applied_upto()
                for server in cluster.storage_servers.values()
            ]
            if applied and min(applied) >= max(sealed) > 0:
                if min(storage_applied) >= max(sealed):
                    break
            _time.sleep(0.05)

        log_digests = {
            n: server.node.chain_digest().hex()
            for n, server in sorted(cluster.node_servers.items())
        }
        vt_digests = {
            n: server.node.vt_digest().hex()
            for n, server in sorted(cluster.node_servers.items())
        }
        storage_digests = {
            s: server.adaptor.state_digest().hex()
            for s, server in sorted(cluster.storage_servers.items())
        }
        duration_s = max(duration_us, 1) / 1e6
        latencies = metrics.latencies_us
        return RunReport(
            mode="live",
            seed=spec.seed,
            workload=spec.kind,
            taas_nodes=len(cfg.taas_ids),
            storage_nodes=len(cfg.storage_ids),
            isolation=spec.isolation.name.lower(),
            consistency=spec.consistency.name.lower(),
            posted=metrics.posted,
            committed=metrics.committed,
            aborted=dict(metrics.aborted),
            lost=metrics.lost,
            duration_us=duration_us,
            txns_per_sec=metrics.committed / duration_s,
            ops_per_sec=metrics.committed_ops / duration_s,
            latency_p50_us=_percentile(latencies, 0.50),
            latency_p95_us=_percentile(latencies, 0.95),
            latency_p99_us=_percentile(latencies, 0.99),
            mean_op_latency_us=(
                sum(latencies) / len(latencies) / max(1, spec.ops_per_txn)
                if latencies
                else 0.0
            ),
            epochs_merged=max(
                (
                    server.node.stats["merged_epochs"]
                    for server in cluster.node_servers.values()
                ),
                default=0,
            ),
            log_digests=log_digests,
            vt_digests=vt_digests,
            storage_digests=storage_digests,
            digests_equal=len(set(log_digests.values())) <= 1
            and len(set(vt_digests.values())) <= 1,
        )
    finally:
        if owned:
            cluster.stop()


def scaling_sweep(
    max_taas: int,
    spec: wl.WorkloadSpec,
    seeds: tuple[int, ...] = (1, 2, 3),
    storage_nodes: int = 1,
    epoch_us: int = 10_000,
    params_fn=None,
) -> list[RunReport]:
    """Reports for cluster sizes 1..max_taas across seeds (sim mode)."""
    from dataclasses import replace

    reports = []
    for size in range(1, max_taas + 1):
        for seed in seeds:
            run_spec = replace(spec, seed=seed)
            params = (
                params_fn(size, seed)
                if params_fn
                else SimParams(seed=seed, post_service_us=400)
            )
            reports.append(
                run_sim(size, storage_nodes, run_spec, epoch_us=epoch_us, params=params)
            )
    return reports


def sweep_table(reports: list[RunReport]) -> str:
    lines = ["taas_nodes seed committed txn_per_sec p95_us"]
    for r in reports:
        lines.append(
            f"{r.taas_nodes:10d} {r.seed:4d} {r.committed:9d} "
            f"{r.txns_per_sec:11.2f} {r.latency_p95_us:6d}"
        )
    return "\n".join(lines) + "\n"
