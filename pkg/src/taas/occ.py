"""Conflict handling for the transaction layer.

The engine has four jobs, all of which must be deterministic across nodes:

  * read-consistency (staleness) checks against the latest commit versions,
  * readset validation per isolation level,
  * the per-epoch writeset merge: one pass in global timestamp order with
    key claim sets, so among same-epoch writers of a key the earliest
    timestamp commits and later ones abort whole,
  * dependency-graph analysis for serializable snapshot isolation.

The merge is a pure function of its input plus the replicated version table
state, which is why every node that received the same epoch batches produces
a byte-identical epoch log.

Validation runs twice by design. The receiving node applies a cheap
stale-only check at post time so clearly doomed transactions abort before
they are ever exchanged; the merge re-validates survivors exactly against
the version table as of the previous epoch. Only the merge-time check
decides the log contents, so commit outcomes never depend on how far any
individual node's merge loop happened to lag when a transaction arrived.
"""

import hashlib
from collections import deque
from dataclasses import dataclass, field

from . import codec
from .model import (
    AbortedTxn,
    AbortReason,
    CommittedTxn,
    EpochGap,
    EpochLog,
    EpochNumber,
    IncompleteInput,
    IsolationLevel,
    ConsistencyMode,
    NodeId,
    TaggedTxn,
    Timestamp,
    TxnId,
    TxnVerdict,
    Version,
    version_before,
)

DEFAULT_WINDOW_EPOCHS = 8

RC = IsolationLevel.READ_COMMITTED
RR = IsolationLevel.REPEATABLE_READ
SI = IsolationLevel.SNAPSHOT_ISOLATION
SSI = IsolationLevel.SERIALIZABLE_SNAPSHOT_ISOLATION


@dataclass(frozen=True, slots=True)
class TxnRecord:
    """Committed-transaction summary retained for dependency analysis.

    All writes of one transaction share a single commit version (the
    transaction's position in its epoch's committed list).
    """

    txn_id: TxnId
    ts: Timestamp
    epoch: EpochNumber
    isolation: IsolationLevel
    reads: tuple[tuple[bytes, Version | None], ...]
    write_keys: tuple[bytes, ...]
    version: Version


@dataclass
class MergeInput:
    """The complete set of per-node batches for one epoch."""

    epoch: EpochNumber
    nodes: tuple[NodeId, ...]
    batches: dict[NodeId, tuple[TaggedTxn, ...]]

    def validate(self) -> None:
        if set(self.batches) != set(self.nodes):
            missing = sorted(set(self.nodes) - set(self.batches))
            raise IncompleteInput(f"missing batches from nodes {missing}")
        for node, txns in self.batches.items():
            for t in txns:
                if t.ts.epoch != self.epoch:
                    raise ValueError(
                        f"txn {t.payload.txn_id} tagged for epoch {t.ts.epoch} "
                        f"in batch for epoch {self.epoch}"
                    )


class VersionTable:
    """Latest commit version per key, plus the retained analysis window.

    Single-writer: only the epoch-apply loop mutates it, strictly in epoch
    order. Readers see fully applied epochs only.
    """

    def __init__(self, window_epochs: int = DEFAULT_WINDOW_EPOCHS) -> None:
        self.window_epochs = window_epochs
        self.applied_upto: int = -1
        self._latest: dict[bytes, tuple[Version, Timestamp]] = {}
        # window: (epoch, records committed that epoch), oldest first
        self._window: deque[tuple[EpochNumber, tuple[TxnRecord, ...]]] = deque()
        self._verdicts: dict[TxnId, TxnVerdict] = {}
        self._verdict_epochs: deque[tuple[EpochNumber, tuple[TxnId, ...]]] = deque()

    def latest_version(self, key: bytes) -> Version | None:
        entry = self._latest.get(key)
        return entry[0] if entry else None

    def latest_entry(self, key: bytes) -> tuple[Version, Timestamp] | None:
        return self._latest.get(key)

    def window_records(self) -> list[TxnRecord]:
        return [rec for _, records in self._window for rec in records]

    def recent_verdict(self, txn_id: TxnId) -> TxnVerdict | None:
        """Verdict for a txn merged within the retained window, if any."""
        return self._verdicts.get(txn_id)

    def apply_log(self, log: EpochLog, records: tuple[TxnRecord, ...] | None = None):
        """Advance the table by the next epoch's log.

        `records` carries the readset-bearing summaries produced by the merge;
        when replaying from bare logs (no readsets available) they are
        synthesized write-only, which is sufficient everywhere except SSI
        analysis — recovery installs real records from a peer snapshot.
        """
        if log.epoch != self.applied_upto + 1:
            raise EpochGap(
                f"cannot apply epoch {log.epoch}, applied up to {self.applied_upto}"
            )
        if records is None:
            records = records_from_log(log)
        for i, c in enumerate(log.committed):
            version = Version(log.epoch, i)
            for w in c.writes:
                self._latest[w.key] = (version, c.ts)
        self._window.append((log.epoch, records))
        ids = []
        for i, c in enumerate(log.committed):
            v = TxnVerdict.committed(c.txn_id, Version(log.epoch, i))
            self._verdicts[c.txn_id] = v
            ids.append(c.txn_id)
        for a in log.aborted:
            self._verdicts[a.txn_id] = TxnVerdict.aborted(a.txn_id, a.reason)
            ids.append(a.txn_id)
        self._verdict_epochs.append((log.epoch, tuple(ids)))
        self.applied_upto = log.epoch
        self._expire()
        return self

    def _expire(self) -> None:
        floor = self.applied_upto - self.window_epochs
        while self._window and self._window[0][0] <= floor:
            self._window.popleft()
        while self._verdict_epochs and self._verdict_epochs[0][0] <= floor:
            _, ids = self._verdict_epochs.popleft()
            for txn_id in ids:
                self._verdicts.pop(txn_id, None)

    def digest(self) -> bytes:
        """Content digest over (applied_upto, sorted key -> version/ts map)."""
        h = hashlib.sha256()
        h.update(self.applied_upto.to_bytes(8, "big", signed=True))
        for key in sorted(self._latest):
            version, ts = self._latest[key]
            h.update(len(key).to_bytes(4, "big"))
            h.update(key)
            h.update(version.epoch.to_bytes(8, "big"))
            h.update(version.index.to_bytes(4, "big"))
            h.update(ts.epoch.to_bytes(8, "big"))
            h.update(ts.tick.to_bytes(8, "big"))
            h.update(ts.node.to_bytes(4, "big"))
        return h.digest()

    def snapshot_state(self):
        """Opaque state tuple for snapshot shipping; see restore_state."""
        return (
            self.applied_upto,
            dict(self._latest),
            tuple(self._window),
            dict(self._verdicts),
            tuple(self._verdict_epochs),
        )

    def restore_state(self, state) -> None:
        applied, latest, window, verdicts, verdict_epochs = state
        self.applied_upto = applied
        self._latest = dict(latest)
        self._window = deque(window)
        self._verdicts = dict(verdicts)
        self._verdict_epochs = deque(verdict_epochs)


def records_from_log(log: EpochLog) -> tuple[TxnRecord, ...]:
    """Write-only records synthesized from a bare log (no readsets)."""
    return tuple(
        TxnRecord(
            txn_id=c.txn_id,
            ts=c.ts,
            epoch=log.epoch,
            isolation=RC,
            reads=(),
            write_keys=tuple(w.key for w in c.writes),
            version=Version(log.epoch, i),
        )
        for i, c in enumerate(log.committed)
    )


def validate_read_consistency(txn: TaggedTxn, vt: VersionTable) -> AbortReason | None:
    """Staleness check under strong read consistency.

    Fails when some read observed a version older than the latest commit
    version this node knows about; reads the node cannot yet account for
    (newer than its applied state) pass and are settled at merge time.
    """
    if txn.payload.consistency == ConsistencyMode.STALE_OK:
        return None
    for entry in txn.payload.reads:
        if version_before(entry.version, vt.latest_version(entry.key)):
            return AbortReason.STALE_READ
    return None


def validate_readset(
    txn: TaggedTxn,
    vt: VersionTable,
    level: IsolationLevel,
    exact: bool = True,
) -> AbortReason | None:
    """Readset validation per isolation level.

    Read committed skips validation entirely. At RR and above a read fails
    when its observed version differs from the table's latest commit version
    (including a sentinel read of a key that now exists). With exact=False
    only observably stale reads fail — the form used at post time, where the
    local table may lag; the merge re-runs the exact form.
    """
    if level == RC:
        return None
    for entry in txn.payload.reads:
        current = vt.latest_version(entry.key)
        if exact:
            if entry.version != current:
                return AbortReason.READ_VALIDATION_FAILED
        elif version_before(entry.version, current):
            return AbortReason.READ_VALIDATION_FAILED
    return None


@dataclass
class MergeDetails:
    """Full merge outcome: the canonical log plus node-facing bookkeeping."""

    log: EpochLog
    records: tuple[TxnRecord, ...]
    # txn ids skipped as duplicates of an already-decided or in-pass txn
    duplicates: tuple[TxnId, ...]


def merge_epoch(minput: MergeInput, vt: VersionTable | None = None) -> EpochLog:
    """Deterministic single-pass merge of one epoch's batches.

    Flattens all batches, sorts by timestamp, and processes in order: a
    transaction commits iff none of its write keys was already claimed by an
    earlier committed transaction of this epoch, claiming its keys on commit;
    otherwise it aborts whole. When a version table is supplied, survivors of
    RR and stricter levels are first re-validated exactly against it, and
    SSI candidates then go through dependency analysis.
    """
    return merge_epoch_details(minput, vt).log


def merge_epoch_details(
    minput: MergeInput, vt: VersionTable | None = None
) -> MergeDetails:
    minput.validate()
    txns = sorted(
        (t for batch in minput.batches.values() for t in batch),
        key=lambda t: t.ts,
    )

    seen: set[TxnId] = set()
    duplicates: list[TxnId] = []
    claimed: set[bytes] = set()
    survivors: list[TaggedTxn] = []
    aborted: list[AbortedTxn] = []

    for txn in txns:
        txn_id = txn.payload.txn_id
        if txn_id in seen or (vt is not None and vt.recent_verdict(txn_id)):
            duplicates.append(txn_id)
            continue
        seen.add(txn_id)
        if vt is not None and txn.payload.isolation >= RR:
            reason = validate_readset(txn, vt, txn.payload.isolation, exact=True)
            if reason is not None:
                aborted.append(AbortedTxn(txn_id, reason))
                continue
        write_keys = [w.key for w in txn.payload.writes]
        if any(k in claimed for k in write_keys):
            aborted.append(AbortedTxn(txn_id, AbortReason.WRITE_CONFLICT_LOST))
            continue
        claimed.update(write_keys)
        survivors.append(txn)

    if vt is not None and any(t.payload.isolation == SSI for t in survivors):
        candidates = _candidate_records(minput.epoch, survivors)
        graph = build_dependency_graph(vt.window_records(), candidates)
        abort_ids = analyze_ssi(graph, [c.txn_id for c in candidates])
        if abort_ids:
            kept = []
            for t in survivors:
                if t.payload.txn_id in abort_ids:
                    aborted.append(
                        AbortedTxn(
                            t.payload.txn_id, AbortReason.SSI_DANGEROUS_STRUCTURE
                        )
                    )
                else:
                    kept.append(t)
            survivors = kept

    committed = tuple(
        CommittedTxn(t.payload.txn_id, t.ts, t.payload.writes) for t in survivors
    )
    log = codec.build_epoch_log(minput.epoch, committed, tuple(aborted))
    records = tuple(
        TxnRecord(
            txn_id=t.payload.txn_id,
            ts=t.ts,
            epoch=minput.epoch,
            isolation=t.payload.isolation,
            reads=tuple((r.key, r.version) for r in t.payload.reads),
            write_keys=tuple(w.key for w in t.payload.writes),
            version=Version(minput.epoch, i),
        )
        for i, t in enumerate(survivors)
    )
    return MergeDetails(log=log, records=records, duplicates=tuple(duplicates))


def _candidate_records(
    epoch: EpochNumber, survivors: list[TaggedTxn]
) -> list[TxnRecord]:
    return [
        TxnRecord(
            txn_id=t.payload.txn_id,
            ts=t.ts,
            epoch=epoch,
            isolation=t.payload.isolation,
            reads=tuple((r.key, r.version) for r in t.payload.reads),
            write_keys=tuple(w.key for w in t.payload.writes),
            version=Version(epoch, i),
        )
        for i, t in enumerate(survivors)
    ]


@dataclass
class DependencyGraph:
    """Typed dependency edges over the analysis window.

    An rw edge T1 -> T2 exists iff T1 read a key at a version older than the
    version T2 wrote for it within the window; wr edges connect a writer to
    readers that observed exactly its version; ww edges connect successive
    writers of a key.
    """

    txns: dict[TxnId, TxnRecord] = field(default_factory=dict)
    rw_out: dict[TxnId, set[TxnId]] = field(default_factory=dict)
    rw_in: dict[TxnId, set[TxnId]] = field(default_factory=dict)
    ww: set[tuple[TxnId, TxnId]] = field(default_factory=set)
    wr: set[tuple[TxnId, TxnId]] = field(default_factory=set)

    def add_rw(self, reader: TxnId, writer: TxnId) -> None:
        self.rw_out.setdefault(reader, set()).add(writer)
        self.rw_in.setdefault(writer, set()).add(reader)


def build_dependency_graph(
    window: list[TxnRecord], candidates: list[TxnRecord]
) -> DependencyGraph:
    graph = DependencyGraph()
    for rec in window:
        graph.txns[rec.txn_id] = rec
    for rec in candidates:
        graph.txns[rec.txn_id] = rec

    writers_by_key: dict[bytes, list[tuple[Version, TxnId]]] = {}
    readers_by_key: dict[bytes, list[tuple[Version | None, TxnId]]] = {}
    for rec in graph.txns.values():
        for key in rec.write_keys:
            writers_by_key.setdefault(key, []).append((rec.version, rec.txn_id))
        for key, observed in rec.reads:
            readers_by_key.setdefault(key, []).append((observed, rec.txn_id))

    for key, writers in writers_by_key.items():
        writers.sort()
        for (_, earlier), (_, later) in zip(writers, writers[1:]):
            graph.ww.add((earlier, later))
        for observed, reader in readers_by_key.get(key, ()):
            for version, writer in writers:
                if writer == reader:
                    continue
                if version_before(observed, version):
                    graph.add_rw(reader, writer)
                elif observed == version:
                    graph.wr.add((writer, reader))
    return graph


def analyze_ssi(graph: DependencyGraph, candidate_commits: list[TxnId]) -> set[TxnId]:
    """Abort set leaving no dangerous structure among surviving commits.

    A dangerous structure is two consecutive rw-antidependency edges
    T1 -> T2 -> T3 where T3 commits first or concurrently with the pivot T2.
    Only this epoch's SSI-level candidates can still be aborted; the pivot
    with the greatest timestamp goes first, and when every pivot of the
    remaining structures is already committed, the youngest abortable
    end of a structure is sacrificed instead.
    """
    eligible = {
        t
        for t in candidate_commits
        if graph.txns[t].isolation == SSI
    }
    aborted: set[TxnId] = set()

    def alive(t: TxnId) -> bool:
        return t not in aborted

    while True:
        structures: list[tuple[TxnId, TxnId, TxnId]] = []
        for pivot, rec in graph.txns.items():
            if not alive(pivot):
                continue
            ins = [t for t in graph.rw_in.get(pivot, ()) if alive(t)]
            outs = [t for t in graph.rw_out.get(pivot, ()) if alive(t)]
            if not ins or not outs:
                continue
            for t3 in outs:
                if graph.txns[t3].epoch > rec.epoch:
                    continue  # T3 commits strictly later: not dangerous
                for t1 in ins:
                    if t1 == pivot or t3 == pivot:
                        continue
                    structures.append((t1, pivot, t3))
        if not structures:
            return aborted

        pivots = {p for _, p, _ in structures if p in eligible and alive(p)}
        if pivots:
            victim = max(pivots, key=lambda t: graph.txns[t].ts)
        else:
            ends = {
                t
                for t1, _, t3 in structures
                for t in (t1, t3)
                if t in eligible and alive(t)
            }
            if not ends:
                # Every member already committed in a prior epoch; nothing
                # can be aborted anymore. Unreachable when the window covers
                # the validation lag, kept as a loop guard.
                return aborted
            victim = max(ends, key=lambda t: graph.txns[t].ts)
        aborted.add(victim)


def apply_epoch_to_version_table(
    vt: VersionTable, log: EpochLog, records: tuple[TxnRecord, ...] | None = None
) -> VersionTable:
    """Apply the next epoch's log to the table; see VersionTable.apply_log."""
    return vt.apply_log(log, records)
