"""Shared builders and independent oracles used across the test suite."""

import random
from collections import Counter
from itertools import permutations

from taas.model import (
    ConsistencyMode,
    IsolationLevel,
    ReadEntry,
    TaggedTxn,
    Timestamp,
    TxnId,
    TxnPayload,
    Version,
    WriteEntry,
)
from taas.occ import MergeInput


def key(i: int) -> bytes:
    return b"k%04d" % i


def payload(
    origin,
    seq,
    writes=(),
    reads=(),
    isolation=IsolationLevel.READ_COMMITTED,
    consistency=ConsistencyMode.STALE_OK,
    labels=(),
):
    return TxnPayload(
        txn_id=TxnId(origin, seq),
        isolation=isolation,
        consistency=consistency,
        reads=tuple(ReadEntry(k, v) for k, v in reads),
        writes=tuple(WriteEntry(k, v) for k, v in writes),
        sub_txn_labels=tuple(labels),
    )


def tagged(p: TxnPayload, epoch: int, tick: int, node: int) -> TaggedTxn:
    return TaggedTxn(payload=p, ts=Timestamp(epoch, tick, node))


def random_merge_input(
    rng: random.Random,
    epoch: int,
    max_nodes: int = 4,
    max_txns: int = 50,
    max_keys: int = 16,
    isolation=IsolationLevel.READ_COMMITTED,
) -> MergeInput:
    n_nodes = rng.randint(1, max_nodes)
    nodes = tuple(range(n_nodes))
    batches: dict[int, list[TaggedTxn]] = {n: [] for n in nodes}
    n_txns = rng.randint(0, max_txns)
    seq = 0
    for _ in range(n_txns):
        node = rng.choice(nodes)
        seq += 1
        n_writes = rng.randint(0, 4)
        write_keys = rng.sample(range(max_keys), k=min(n_writes, max_keys))
        writes = [(key(k), b"v%d" % seq) for k in write_keys]
        p = payload(node, seq, writes=writes, isolation=isolation)
        tick = len(batches[node]) + 1
        batches[node].append(tagged(p, epoch, tick, node))
    return MergeInput(
        epoch=epoch,
        nodes=nodes,
        batches={n: tuple(b) for n, b in batches.items()},
    )


def claim_oracle(minput: MergeInput):
    """Brute-force first-writer-win oracle: enumerate in timestamp order and
    simulate key claims; returns (committed ids in order, aborted ids)."""
    txns = sorted(
        (t for b in minput.batches.values() for t in b), key=lambda t: t.ts
    )
    claimed = set()
    committed, aborted = [], []
    for t in txns:
        keys = [w.key for w in t.payload.writes]
        if any(k in claimed for k in keys):
            aborted.append(t.payload.txn_id)
        else:
            claimed.update(keys)
            committed.append(t.payload.txn_id)
    return committed, aborted


class MiniCluster:
    """Simulated cluster with direct payload posting and verdict capture."""

    def __init__(self, n_nodes=3, n_storage=1, params=None, **cfg_kwargs):
        from taas.exchange import ClusterConfig
        from taas.sim import SimCluster, SimParams
        from taas.storage import ShardRange

        cfg = ClusterConfig(
            taas_ids=tuple(range(n_nodes)),
            storage_ids=tuple(range(n_storage)),
            **cfg_kwargs,
        )
        self.cluster = SimCluster(
            cfg, params or SimParams(seed=0, trace=True)
        )
        self.cfg = cfg
        self.verdicts: dict[TxnId, object] = {}
        self.replies: list = []
        self._client_seq = 0
        self.cluster.net.register(("client", 0), self._on_client_msg)

    def _on_client_msg(self, src, msg):
        self.replies.append(msg)
        if getattr(msg, "verdict", None) is not None:
            self.verdicts[msg.txn_id] = msg.verdict

    def post(self, node_id: int, p: TxnPayload):
        from taas.wire import PostTxn

        self.cluster.net.send(("client", 0), ("taas", node_id), PostTxn(p))

    def query(self, node_id: int, txn_id: TxnId):
        from taas.wire import QueryVerdict

        self.cluster.net.send(
            ("client", 0), ("taas", node_id), QueryVerdict(txn_id)
        )

    def run_until(self, cond, max_ms=5_000):
        return self.cluster.scheduler.run_until(
            cond, max_time_us=self.cluster.scheduler.now + max_ms * 1000
        )

    def run_for(self, ms: float):
        deadline = self.cluster.scheduler.now + int(ms * 1000)
        self.cluster.scheduler.run_until(
            lambda: self.cluster.scheduler.now >= deadline, max_time_us=deadline + 1
        )

    def await_verdict(self, txn_id: TxnId, max_ms=5_000):
        assert self.run_until(lambda: txn_id in self.verdicts, max_ms=max_ms), (
            f"no verdict for {txn_id}"
        )
        return self.verdicts[txn_id]

    def batch_message_count(self) -> int:
        from taas.wire import Kind

        counts = self.cluster.net.message_counts()
        return counts.get(int(Kind.BATCH), 0) + counts.get(
            int(Kind.BATCH_TERMINAL), 0
        )


class IncrementContention:
    """Random increment scenario over shared counters at snapshot isolation.

    Clients read a counter at a possibly lagging version, write value+1, and
    the merge decides. Tracks the value at every committed version so the
    lost-update oracle can compare the final value against the number of
    committed increments.
    """

    def __init__(self, seed: int, n_counters: int = 2, n_nodes: int = 2):
        from taas.occ import MergeInput, VersionTable, merge_epoch_details

        self._merge_input = MergeInput
        self._merge = merge_epoch_details
        self.rng = random.Random(seed)
        self.vt = VersionTable()
        self.nodes = tuple(range(n_nodes))
        self.keys = [b"ctr%d" % i for i in range(n_counters)]
        # value of each key at each committed version; seeded below
        self.values: dict[bytes, dict[Version, int]] = {k: {} for k in self.keys}
        self.latest_snapshots: list[dict[bytes, Version]] = []
        self.committed_increments: dict[bytes, int] = {k: 0 for k in self.keys}
        self.committed_reads: list[tuple[bytes, Version]] = []
        self.seq = 0
        self.epoch = 0
        self._seed_counters()

    def _seed_counters(self):
        txns = []
        for i, k in enumerate(self.keys):
            self.seq += 1
            p = payload(
                0, self.seq, writes=[(k, b"0")], isolation=IsolationLevel.SNAPSHOT_ISOLATION
            )
            txns.append(tagged(p, 0, i + 1, 0))
        self._run_epoch({0: tuple(txns)} | {n: () for n in self.nodes if n != 0})

    def _run_epoch(self, batches):
        minput = self._merge_input(epoch=self.epoch, nodes=self.nodes, batches=batches)
        details = self._merge(minput, self.vt)
        by_id = {}
        for b in batches.values():
            for t in b:
                by_id[t.payload.txn_id] = t
        for rec in details.records:
            txn = by_id[rec.txn_id]
            for w in txn.payload.writes:
                self.values[w.key][rec.version] = int(w.value)
                if rec.epoch > 0:
                    self.committed_increments[w.key] += 1
            if rec.epoch > 0:
                for k, v in rec.reads:
                    self.committed_reads.append((k, v))
        self.vt.apply_log(details.log, details.records)
        self.latest_snapshots.append(
            {k: self.vt.latest_version(k) for k in self.keys}
        )
        self.epoch += 1

    def value_at(self, key: bytes, version: Version) -> int:
        return self.values[key][version]

    def run_contention_epochs(self, n_epochs: int, txns_per_epoch: int):
        rng = self.rng
        for _ in range(n_epochs):
            batches = {n: [] for n in self.nodes}
            for _ in range(txns_per_epoch):
                self.seq += 1
                node = rng.choice(self.nodes)
                key = rng.choice(self.keys)
                lag = rng.randint(0, min(3, len(self.latest_snapshots) - 1))
                snap = self.latest_snapshots[-1 - lag]
                version = snap[key]
                new_value = self.value_at(key, version) + 1
                p = payload(
                    node,
                    self.seq,
                    reads=[(key, version)],
                    writes=[(key, b"%d" % new_value)],
                    isolation=IsolationLevel.SNAPSHOT_ISOLATION,
                )
                batches[node].append(
                    tagged(p, self.epoch, len(batches[node]) + 1, node)
                )
            self._run_epoch({n: tuple(b) for n, b in batches.items()})

    def final_value(self, key: bytes) -> int:
        return self.value_at(key, self.vt.latest_version(key))


def is_serializable(committed_records, initial_versions):
    """Exhaustive permutation-based serializability check.

    Each record is (reads: {key: version-or-None}, writes: {key: version}).
    A history is serializable iff some serial order replays every recorded
    read at exactly the version the transaction observed.
    """
    records = list(committed_records)
    for perm in permutations(records):
        state = dict(initial_versions)
        ok = True
        for reads, writes in perm:
            for k, observed in reads.items():
                if state.get(k) != observed:
                    ok = False
                    break
            if not ok:
                break
            state.update(writes)
        if ok:
            return True
    return not records
