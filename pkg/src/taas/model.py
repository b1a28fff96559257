"""Core domain types shared by every layer of the transaction service.

Everything here is an immutable value object: identifiers, timestamps,
readsets/writesets, verdicts, and epoch logs. Instances are safe to share
between threads and to hash into digests.
"""

import enum
from dataclasses import dataclass, field

# A node identity within one cluster configuration. Client originators draw
# ids from the same space; the run harness keeps them disjoint from server ids.
NodeId = int

# Count of elapsed epoch intervals since cluster start.
EpochNumber = int

# A read of a key that has never been written records this sentinel instead
# of a Version, so "still absent" can be validated later.
SENTINEL_UNREAD = None


@dataclass(frozen=True, order=True, slots=True)
class TxnId:
    """Globally unique transaction identity: (originator, per-originator seq)."""

    origin: NodeId
    seq: int


@dataclass(frozen=True, order=True, slots=True)
class Timestamp:
    """Commit-ordering key: lexicographic over (epoch, tick, node).

    Ticks strictly increase between taggings on one node within one epoch,
    and node ids are distinct cluster-wide, so no two tagged transactions
    ever compare equal.
    """

    epoch: EpochNumber
    tick: int
    node: NodeId


def compare_timestamps(a: Timestamp, b: Timestamp) -> int:
    """Total order on timestamps: -1, 0, or 1."""
    if a < b:
        return -1
    if a > b:
        return 1
    return 0


@dataclass(frozen=True, order=True, slots=True)
class Version:
    """Commit version of a record: (epoch, position in that epoch's commit list).

    Assigned identically on the transaction and storage tiers from the same
    epoch log, which is what makes staleness checks sound.
    """

    epoch: EpochNumber
    index: int


def version_before(observed: Version | None, current: Version | None) -> bool:
    """True when `observed` is older than `current`; SENTINEL_UNREAD is oldest."""
    if current is None:
        return False
    if observed is None:
        return True
    return observed < current


class IsolationLevel(enum.IntEnum):
    """Isolation levels ordered by strictness (RC < RR <= SI < SSI)."""

    READ_COMMITTED = 0
    REPEATABLE_READ = 1
    SNAPSHOT_ISOLATION = 2
    SERIALIZABLE_SNAPSHOT_ISOLATION = 3


class ConsistencyMode(enum.IntEnum):
    STRONG = 0
    STALE_OK = 1


class Decision(enum.IntEnum):
    COMMITTED = 0
    ABORTED = 1


class AbortReason(enum.IntEnum):
    STALE_READ = 1
    READ_VALIDATION_FAILED = 2
    WRITE_CONFLICT_LOST = 3
    SSI_DANGEROUS_STRUCTURE = 4
    NODE_SHUTDOWN = 5


@dataclass(frozen=True, slots=True)
class ReadEntry:
    """One observed read: key plus the Version it returned (None if absent)."""

    key: bytes
    version: Version | None = SENTINEL_UNREAD


@dataclass(frozen=True, slots=True)
class WriteEntry:
    """One buffered write; value None is a delete tombstone."""

    key: bytes
    value: bytes | None


@dataclass(frozen=True, slots=True)
class TxnPayload:
    """The unit crossing the execution -> transaction-layer boundary.

    Keys are unique within reads and within writes. A composite transaction
    carries the labels of its sub-transactions and is posted as one unit to
    exactly one node.
    """

    txn_id: TxnId
    isolation: IsolationLevel
    consistency: ConsistencyMode
    reads: tuple[ReadEntry, ...]
    writes: tuple[WriteEntry, ...]
    sub_txn_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        read_keys = [r.key for r in self.reads]
        if len(set(read_keys)) != len(read_keys):
            raise ValueError("duplicate keys in readset")
        write_keys = [w.key for w in self.writes]
        if len(set(write_keys)) != len(write_keys):
            raise ValueError("duplicate keys in writeset")


@dataclass(frozen=True, slots=True)
class TaggedTxn:
    """A payload after its receiving node stamped it into an epoch."""

    payload: TxnPayload
    ts: Timestamp


@dataclass(frozen=True, slots=True)
class TxnVerdict:
    txn_id: TxnId
    decision: Decision
    reason: AbortReason | None = None
    commit_version: Version | None = None

    def __post_init__(self) -> None:
        if self.decision == Decision.COMMITTED:
            if self.reason is not None or self.commit_version is None:
                raise ValueError("committed iff reason is None and commit_version set")
        elif self.reason is None or self.commit_version is not None:
            raise ValueError("aborted verdicts carry a reason and no version")

    @classmethod
    def committed(cls, txn_id: TxnId, version: Version) -> "TxnVerdict":
        return cls(txn_id, Decision.COMMITTED, None, version)

    @classmethod
    def aborted(cls, txn_id: TxnId, reason: AbortReason) -> "TxnVerdict":
        return cls(txn_id, Decision.ABORTED, reason, None)


@dataclass(frozen=True, slots=True)
class CommittedTxn:
    """One committed entry of an epoch log: identity, order key, full writeset."""

    txn_id: TxnId
    ts: Timestamp
    writes: tuple[WriteEntry, ...]


@dataclass(frozen=True, slots=True)
class AbortedTxn:
    txn_id: TxnId
    reason: AbortReason


@dataclass(frozen=True, slots=True)
class EpochLog:
    """Deterministic merge output of one epoch; the unit of durability and replay.

    `committed` is sorted by timestamp, `aborted` by transaction id, and
    `digest` is a pure function of the canonical encoding — byte-identical
    on every node that merged the same inputs. Construct via
    `taas.codec.build_epoch_log` so the digest is always consistent.
    """

    epoch: EpochNumber
    committed: tuple[CommittedTxn, ...]
    aborted: tuple[AbortedTxn, ...]
    digest: bytes = field(compare=False)


@dataclass(frozen=True, slots=True)
class VersionedRecord:
    """Storage cell: value (None = tombstone) plus its commit version."""

    key: bytes
    value: bytes | None
    version: Version


class EpochGap(Exception):
    """A log was applied out of order (skips ahead of the applied cursor)."""


class IncompleteInput(Exception):
    """A merge was attempted before every cluster node contributed a batch."""
