"""Epoch clocking and reliable per-epoch batch dissemination.

Each node runs a purely local epoch timer; a batch sealed for epoch e is
chunked, sent to every peer, and retransmitted until acknowledged. Quorum
acknowledgment (self counts) gates commit verdicts; retransmission to
stragglers continues past quorum so every node eventually assembles every
batch. Collection for an epoch completes only once terminal batches from
all cluster nodes are present, and collection of later epochs proceeds
while earlier merges are still running.
"""

import json
import os
from dataclasses import dataclass, field, replace

from .model import EpochNumber, IncompleteInput, IsolationLevel, ConsistencyMode, NodeId, TaggedTxn
from .occ import DEFAULT_WINDOW_EPOCHS, MergeInput
from .wire import AckMessage, BatchMessage, PendingBatch, chunk_batch

DEFAULT_EPOCH_INTERVAL_US = 10_000


@dataclass(frozen=True)
class ClusterConfig:
    """Static cluster membership and protocol knobs for one run."""

    taas_ids: tuple[NodeId, ...]
    storage_ids: tuple[int, ...] = (0,)
    taas_addresses: dict = field(default_factory=dict)
    storage_addresses: dict = field(default_factory=dict)
    epoch_interval_us: int = DEFAULT_EPOCH_INTERVAL_US
    epoch_origin_us: int = 0
    quorum: int = 0  # 0 -> majority, filled in __post_init__
    window_epochs: int = DEFAULT_WINDOW_EPOCHS
    peer_timeout_mult: int = 10
    retransmit_mult: int = 2
    retry_budget: int = 10
    straggler_budget: int = 50
    chunk_bytes: int = 64 * 1024
    segment_epochs: int = 64
    snapshot_every: int = 64
    push_retry_mult: int = 5
    isolation_default: IsolationLevel = IsolationLevel.SNAPSHOT_ISOLATION
    consistency_default: ConsistencyMode = ConsistencyMode.STRONG
    durable: bool = False
    ack_mode: str = "persisted"  # or "merged"
    pipelined: bool = True  # exchange next epoch while previous merge runs
    # post-time validation aborts doomed txns before exchange; disable to
    # route every decision through the (merge-time) deterministic path
    early_validation: bool = True

    def __post_init__(self):
        if not self.taas_ids:
            raise ValueError("cluster needs at least one transaction node")
        if len(set(self.taas_ids)) != len(self.taas_ids):
            raise ValueError("node ids must be distinct")
        if self.quorum == 0:
            object.__setattr__(self, "quorum", len(self.taas_ids) // 2 + 1)
        if self.quorum > len(self.taas_ids):
            raise ValueError("quorum larger than cluster")

    @property
    def peer_timeout_us(self) -> int:
        return self.peer_timeout_mult * self.epoch_interval_us

    @property
    def retransmit_us(self) -> int:
        return self.retransmit_mult * self.epoch_interval_us

    def peers_of(self, node_id: NodeId) -> tuple[NodeId, ...]:
        return tuple(n for n in self.taas_ids if n != node_id)

    def to_json(self) -> str:
        doc = {
            "taas": [
                {"id": n, "address": list(self.taas_addresses.get(n, ()))}
                for n in self.taas_ids
            ],
            "storage": [
                {"id": s, "address": list(self.storage_addresses.get(s, ()))}
                for s in self.storage_ids
            ],
            "epoch_ms": self.epoch_interval_us / 1000,
            "epoch_origin_us": self.epoch_origin_us,
            "quorum": self.quorum,
            "window_epochs": self.window_epochs,
            "isolation_default": self.isolation_default.name.lower(),
            "consistency_default": self.consistency_default.name.lower(),
            "durable": self.durable,
        }
        return json.dumps(doc, indent=2)


ISOLATION_NAMES = {
    "rc": IsolationLevel.READ_COMMITTED,
    "read_committed": IsolationLevel.READ_COMMITTED,
    "rr": IsolationLevel.REPEATABLE_READ,
    "repeatable_read": IsolationLevel.REPEATABLE_READ,
    "si": IsolationLevel.SNAPSHOT_ISOLATION,
    "snapshot_isolation": IsolationLevel.SNAPSHOT_ISOLATION,
    "ssi": IsolationLevel.SERIALIZABLE_SNAPSHOT_ISOLATION,
    "serializable_snapshot_isolation": IsolationLevel.SERIALIZABLE_SNAPSHOT_ISOLATION,
}

CONSISTENCY_NAMES = {
    "strong": ConsistencyMode.STRONG,
    "staleok": ConsistencyMode.STALE_OK,
    "stale_ok": ConsistencyMode.STALE_OK,
}


def config_from_json(text: str) -> ClusterConfig:
    """Parse the cluster config file; TAAS_EPOCH_MS overrides the interval."""
    doc = json.loads(text)
    taas_ids = tuple(entry["id"] for entry in doc["taas"])
    storage = doc.get("storage", [{"id": 0, "address": []}])
    epoch_ms = float(doc.get("epoch_ms", 10))
    env_override = os.environ.get("TAAS_EPOCH_MS")
    if env_override:
        epoch_ms = float(env_override)
    return ClusterConfig(
        taas_ids=taas_ids,
        storage_ids=tuple(entry["id"] for entry in storage),
        taas_addresses={
            entry["id"]: tuple(entry["address"])
            for entry in doc["taas"]
            if entry.get("address")
        },
        storage_addresses={
            entry["id"]: tuple(entry["address"])
            for entry in storage
            if entry.get("address")
        },
        epoch_interval_us=int(epoch_ms * 1000),
        epoch_origin_us=int(doc.get("epoch_origin_us", 0)),
        quorum=int(doc.get("quorum", 0)),
        window_epochs=int(doc.get("window_epochs", DEFAULT_WINDOW_EPOCHS)),
        isolation_default=ISOLATION_NAMES[
            doc.get("isolation_default", "si").lower()
        ],
        consistency_default=CONSISTENCY_NAMES[
            doc.get("consistency_default", "strong").lower()
        ],
        durable=bool(doc.get("durable", False)),
    )


def load_config(path: str) -> ClusterConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())


class EpochClock:
    """Local epoch counter driven by a monotonic clock reading.

    `advance` moves at most one boundary per call; after a clock stall the
    caller keeps invoking it until it returns None, which yields every
    intermediate epoch so the log sequence stays gap-free.
    """

    def __init__(self, interval_us: int, origin_us: int = 0, start_epoch: int = 0):
        self.interval_us = interval_us
        self.origin_us = origin_us
        self.current: EpochNumber = start_epoch

    def epoch_at(self, now_us: int) -> EpochNumber:
        if now_us <= self.origin_us:
            return 0
        return (now_us - self.origin_us) // self.interval_us

    def advance(self, now_us: int) -> EpochNumber | None:
        if self.epoch_at(now_us) > self.current:
            self.current += 1
            return self.current
        return None

    def next_boundary_us(self) -> int:
        return self.origin_us + (self.current + 1) * self.interval_us


@dataclass
class QuorumOutcome:
    epoch: EpochNumber
    achieved: bool
    acks: int


class Broadcaster:
    """Sends sealed epoch batches to every peer and tracks acknowledgments.

    Fires `on_quorum` exactly once per epoch: Achieved once `quorum` nodes
    (self included) hold the batch, or Failed once the retry budget is
    exhausted first. Keeps retransmitting to unacked peers after quorum, up
    to a larger straggler budget, so a healthy cluster converges without
    repair traffic.
    """

    def __init__(self, node_id, cfg: ClusterConfig, env, send_peer, on_quorum):
        self.node_id = node_id
        self.cfg = cfg
        self.peers = cfg.peers_of(node_id)
        self.env = env
        self.send_peer = send_peer
        self.on_quorum = on_quorum
        self._epochs: dict[EpochNumber, dict] = {}
        self._stopped = False

    def broadcast(self, epoch: EpochNumber, txns: tuple[TaggedTxn, ...]) -> None:
        chunks = chunk_batch(self.node_id, epoch, txns, self.cfg.chunk_bytes)
        state = {
            "chunks": chunks,
            "acked": {self.node_id},
            "achieved": False,
            "decided": False,
            "attempts": 0,
            "timer": None,
        }
        self._epochs[epoch] = state
        for peer in self.peers:
            for chunk in chunks:
                self.send_peer(peer, chunk)
        self._check_quorum(epoch, state)
        if not state["decided"] or len(state["acked"]) < len(self.cfg.taas_ids):
            state["timer"] = self.env.schedule(
                self.cfg.retransmit_us, lambda: self._retransmit(epoch)
            )

    def on_ack(self, msg: AckMessage) -> None:
        state = self._epochs.get(msg.acking_epoch)
        if state is None:
            return
        state["acked"].add(msg.sender)
        self._check_quorum(msg.acking_epoch, state)
        if len(state["acked"]) >= len(self.cfg.taas_ids):
            self._finish(msg.acking_epoch, state)

    def quorum_achieved(self, epoch: EpochNumber) -> bool:
        state = self._epochs.get(epoch)
        return bool(state and state["achieved"])

    def _check_quorum(self, epoch, state) -> None:
        if state["decided"]:
            return
        if len(state["acked"]) >= self.cfg.quorum:
            state["achieved"] = True
            state["decided"] = True
            self.on_quorum(QuorumOutcome(epoch, True, len(state["acked"])))

    def _retransmit(self, epoch: EpochNumber) -> None:
        state = self._epochs.get(epoch)
        if state is None or self._stopped:
            return
        state["attempts"] += 1
        if not state["decided"] and state["attempts"] > self.cfg.retry_budget:
            state["decided"] = True
            self.on_quorum(QuorumOutcome(epoch, False, len(state["acked"])))
            self._finish(epoch, state)
            return
        if state["attempts"] > self.cfg.straggler_budget:
            self._finish(epoch, state)
            return
        for peer in self.peers:
            if peer not in state["acked"]:
                for chunk in state["chunks"]:
                    self.send_peer(peer, chunk)
        state["timer"] = self.env.schedule(
            self.cfg.retransmit_us, lambda: self._retransmit(epoch)
        )

    def _finish(self, epoch, state) -> None:
        if state["timer"] is not None:
            state["timer"].cancel()
        self._epochs.pop(epoch, None)

    def stop(self) -> None:
        self._stopped = True
        for state in self._epochs.values():
            if state["timer"] is not None:
                state["timer"].cancel()
        self._epochs.clear()


class Collector:
    """Assembles per-epoch batches from all nodes into complete merge inputs.

    At-least-once delivery with deduplication by (sender, epoch, chunk seq);
    acknowledges a sender's batch once its terminal chunk and every earlier
    chunk are present. `on_complete` fires exactly once per epoch, in receipt
    order (not necessarily epoch order); `on_timeout` fires when a peer's
    terminal batch is still missing after the deadline, and re-arms.
    """

    def __init__(self, node_id, cfg: ClusterConfig, env, send_ack, on_complete, on_timeout):
        self.node_id = node_id
        self.cfg = cfg
        self.env = env
        self.send_ack = send_ack
        self.on_complete = on_complete
        self.on_timeout = on_timeout
        self._chunks: dict[tuple[NodeId, EpochNumber], dict[int, tuple]] = {}
        self._terminal: dict[tuple[NodeId, EpochNumber], int] = {}
        self._assembled: dict[EpochNumber, dict[NodeId, tuple[TaggedTxn, ...]]] = {}
        self._fired: set[EpochNumber] = set()
        self._floor: int = -1  # epochs <= floor are already merged
        self._timers: dict[EpochNumber, object] = {}

    def add_local(self, epoch: EpochNumber, txns: tuple[TaggedTxn, ...]) -> None:
        self._install(self.node_id, epoch, txns)

    def expect(self, epoch: EpochNumber) -> None:
        if epoch in self._timers or epoch in self._fired or epoch <= self._floor:
            return
        self._timers[epoch] = self.env.schedule(
            self.cfg.peer_timeout_us, lambda: self._deadline(epoch)
        )

    def on_batch(self, msg: BatchMessage) -> None:
        key = (msg.sender, msg.epoch)
        if msg.epoch <= self._floor or msg.sender in self._assembled.get(msg.epoch, {}):
            # late or duplicate delivery: re-ack terminals so the sender stops
            if msg.terminal:
                self.send_ack(
                    msg.sender,
                    AckMessage(self.node_id, msg.sender, msg.epoch),
                )
            return
        chunks = self._chunks.setdefault(key, {})
        chunks[msg.seq] = msg.txns
        if msg.terminal:
            self._terminal[key] = msg.seq
        terminal_seq = self._terminal.get(key)
        if terminal_seq is not None and all(
            s in chunks for s in range(terminal_seq + 1)
        ):
            txns = tuple(
                t for s in range(terminal_seq + 1) for t in chunks[s]
            )
            self._chunks.pop(key, None)
            self._terminal.pop(key, None)
            self._install(msg.sender, msg.epoch, txns)
            self.send_ack(
                msg.sender, AckMessage(self.node_id, msg.sender, msg.epoch)
            )

    def install(self, node: NodeId, epoch: EpochNumber, txns) -> None:
        """Repair path: adopt a fully assembled batch from a peer snapshot."""
        if epoch <= self._floor:
            return
        self._install(node, epoch, tuple(txns))

    def _install(self, node, epoch, txns) -> None:
        per_epoch = self._assembled.setdefault(epoch, {})
        if node in per_epoch:
            return
        per_epoch[node] = txns
        self._check_complete(epoch)

    def _check_complete(self, epoch: EpochNumber) -> None:
        if epoch in self._fired:
            return
        per_epoch = self._assembled.get(epoch, {})
        if set(per_epoch) != set(self.cfg.taas_ids):
            return
        self._fired.add(epoch)
        timer = self._timers.pop(epoch, None)
        if timer is not None:
            timer.cancel()
        self.on_complete(
            MergeInput(
                epoch=epoch,
                nodes=self.cfg.taas_ids,
                batches=dict(per_epoch),
            )
        )

    def _deadline(self, epoch: EpochNumber) -> None:
        if epoch in self._fired or epoch <= self._floor:
            self._timers.pop(epoch, None)
            return
        missing = tuple(
            n for n in self.cfg.taas_ids if n not in self._assembled.get(epoch, {})
        )
        self.on_timeout(epoch, missing)
        self._timers[epoch] = self.env.schedule(
            self.cfg.peer_timeout_us, lambda: self._deadline(epoch)
        )

    def discard(self, epoch: EpochNumber) -> None:
        """Drop state for a merged epoch; late chunks below it are ignored."""
        self._floor = max(self._floor, epoch)
        self._assembled.pop(epoch, None)
        timer = self._timers.pop(epoch, None)
        if timer is not None:
            timer.cancel()
        for key in [k for k in self._chunks if k[1] <= self._floor]:
            self._chunks.pop(key, None)
            self._terminal.pop(key, None)

    def pending_complete(self) -> list[PendingBatch]:
        """Assembled but unmerged batches, for snapshot-based repair."""
        out = []
        for epoch in sorted(self._assembled):
            for node, txns in sorted(self._assembled[epoch].items()):
                out.append(PendingBatch(node=node, epoch=epoch, txns=txns))
        return out

    def has_batch(self, node: NodeId, epoch: EpochNumber) -> bool:
        return node in self._assembled.get(epoch, {})

    def stop(self) -> None:
        for timer in self._timers.values():
            timer.cancel()
        self._timers.clear()
