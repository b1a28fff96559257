"""Execution-layer SDK: optimistic transaction sessions.

A session reads through storage, records the observed version of every key
it touches, buffers writes locally (read-your-own-writes), and on commit
assembles the readset/writeset payload that is posted to a transaction
node. Under snapshot isolation and stricter levels, every written key is
also recorded in the readset at its pre-write version, which is what turns
the merge's validation into first-committer-wins for blind writes.

Sessions are transport-free: reads go through a `DataSource` (anything with
``get_data(key) -> VersionedRecord | None``), and the caller decides how the
assembled payload travels.
"""

import enum
import random
from dataclasses import dataclass, field

from .model import (
    ConsistencyMode,
    IsolationLevel,
    NodeId,
    ReadEntry,
    SENTINEL_UNREAD,
    TxnId,
    TxnPayload,
    TxnVerdict,
    Version,
    WriteEntry,
)


class SessionState(enum.Enum):
    ACTIVE = "active"
    POSTED = "posted"
    DECIDED = "decided"


class TxnIdAllocator:
    """Per-originator monotonically increasing transaction ids."""

    def __init__(self, origin: NodeId, start: int = 0):
        self.origin = origin
        self._next = start

    def allocate(self) -> TxnId:
        self._next += 1
        return TxnId(self.origin, self._next)


_VALIDATED_WRITE_LEVELS = (
    IsolationLevel.SNAPSHOT_ISOLATION,
    IsolationLevel.SERIALIZABLE_SNAPSHOT_ISOLATION,
)


class TxnSession:
    def __init__(
        self,
        txn_id: TxnId,
        source,
        isolation: IsolationLevel,
        consistency: ConsistencyMode,
    ):
        self.txn_id = txn_id
        self.isolation = isolation
        self.consistency = consistency
        self.source = source
        self.state = SessionState.ACTIVE
        self.read_buffer: dict[bytes, tuple[bytes | None, Version | None]] = {}
        self.write_buffer: dict[bytes, bytes | None] = {}
        self.verdict: TxnVerdict | None = None

    def _require_active(self) -> None:
        if self.state != SessionState.ACTIVE:
            raise RuntimeError(f"session {self.txn_id} is {self.state.value}")

    def _fetch(self, key: bytes) -> tuple[bytes | None, Version | None]:
        if key in self.read_buffer:
            return self.read_buffer[key]
        rec = self.source.get_data(key)
        if rec is None:
            entry = (None, SENTINEL_UNREAD)
        else:
            entry = (rec.value, rec.version)
        self.read_buffer[key] = entry
        return entry

    def read(self, key: bytes) -> bytes | None:
        """Value of `key`, observing this session's own writes first."""
        self._require_active()
        if key in self.write_buffer:
            return self.write_buffer[key]
        value, _ = self._fetch(key)
        return value

    def write(self, key: bytes, value: bytes | None) -> None:
        """Buffer a write; value None deletes. Last write per key wins."""
        self._require_active()
        if self.isolation in _VALIDATED_WRITE_LEVELS and key not in self.read_buffer:
            self._fetch(key)  # record the pre-write version
        self.write_buffer[key] = value

    def delete(self, key: bytes) -> None:
        self.write(key, None)

    def build_payload(self, labels: tuple[str, ...] = ()) -> TxnPayload:
        self._require_active()
        payload = TxnPayload(
            txn_id=self.txn_id,
            isolation=self.isolation,
            consistency=self.consistency,
            reads=tuple(
                ReadEntry(key, version)
                for key, (_, version) in sorted(self.read_buffer.items())
            ),
            writes=tuple(
                WriteEntry(key, value)
                for key, value in sorted(self.write_buffer.items())
            ),
            sub_txn_labels=labels,
        )
        self.state = SessionState.POSTED
        return payload

    def decide(self, verdict: TxnVerdict) -> None:
        self.verdict = verdict
        self.state = SessionState.DECIDED


@dataclass
class CompositeTxn:
    """Sub-transactions sharing one id, committed atomically as one payload.

    Sub-buffers merge in label order: writes are unioned (later sub wins on
    the rare shared key) and each read keeps the oldest observed version, so
    a stale read in any sub-transaction fails the whole composite.
    """

    txn_id: TxnId
    isolation: IsolationLevel
    consistency: ConsistencyMode
    source: object
    subs: list[tuple[str, TxnSession]] = field(default_factory=list)

    def sub(self, label: str) -> TxnSession:
        session = TxnSession(self.txn_id, self.source, self.isolation, self.consistency)
        self.subs.append((label, session))
        return session

    def build_payload(self) -> TxnPayload:
        reads: dict[bytes, Version | None] = {}
        writes: dict[bytes, bytes | None] = {}
        labels = []
        for label, session in self.subs:
            labels.append(label)
            for key, (_, version) in session.read_buffer.items():
                if key not in reads:
                    reads[key] = version
                elif version is None or (
                    reads[key] is not None and version < reads[key]
                ):
                    reads[key] = version
            writes.update(session.write_buffer)
            session.state = SessionState.POSTED
        return TxnPayload(
            txn_id=self.txn_id,
            isolation=self.isolation,
            consistency=self.consistency,
            reads=tuple(ReadEntry(k, v) for k, v in sorted(reads.items())),
            writes=tuple(WriteEntry(k, v) for k, v in sorted(writes.items())),
            sub_txn_labels=tuple(labels),
        )


class RandomRouter:
    """Uniform random choice of a transaction node per commit.

    The router seam exists so smarter placement (e.g. key-affinity) can be
    swapped in without touching the SDK.
    """

    def __init__(self, node_ids, rng: random.Random):
        self.node_ids = tuple(node_ids)
        self.rng = rng

    def pick(self, exclude: NodeId | None = None) -> NodeId:
        choices = [n for n in self.node_ids if n != exclude] or list(self.node_ids)
        return self.rng.choice(choices)
