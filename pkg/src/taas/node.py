"""One transaction-layer node: accepts posts, tags, validates, exchanges,
merges, persists, notifies clients, pushes logs to storage, and recovers
from peers after a restart.

The node is written sans-IO: all effects go through an environment object
(`now`, `schedule`, `send_peer`, `send_storage`, `reply`), so the same code
runs on the deterministic virtual-time simulator and on sockets.

Commit verdicts are released only after the containing epoch log is
persisted locally and the node's own batch for that epoch reached quorum;
abort verdicts go out as soon as they are known. Every verdict is delivered
exactly once per transaction id, and decisions can be re-queried later.
"""

import enum
from collections import defaultdict

from . import wire
from .exchange import Broadcaster, ClusterConfig, Collector, EpochClock, QuorumOutcome
from .logstore import LogStore
from .model import (
    AbortReason,
    Decision,
    EpochNumber,
    NodeId,
    TaggedTxn,
    Timestamp,
    TxnId,
    TxnPayload,
    TxnVerdict,
    Version,
)
from .occ import (
    MergeInput,
    VersionTable,
    merge_epoch_details,
    validate_read_consistency,
    validate_readset,
)
from .wire import (
    AckMessage,
    BatchMessage,
    GetLatestVersion,
    LatestVersionResponse,
    PendingBatch,
    PostTxn,
    PushAck,
    PushLog,
    QueryVerdict,
    SnapshotRequest,
    SnapshotResponse,
    VerdictMessage,
)


class Phase(enum.Enum):
    STARTING = "starting"
    ACTIVE = "active"
    HALTED = "halted"


class TaasNode:
    def __init__(
        self,
        node_id: NodeId,
        cfg: ClusterConfig,
        env,
        data_dir: str | None = None,
    ):
        self.node_id = node_id
        self.cfg = cfg
        self.env = env
        self.phase = Phase.STARTING
        self.vt = VersionTable(window_epochs=cfg.window_epochs)
        self.log_store = LogStore(
            data_dir=data_dir,
            segment_epochs=cfg.segment_epochs,
            snapshot_every=cfg.snapshot_every,
            fsync=cfg.durable and cfg.ack_mode == "persisted",
        )
        self.clock = EpochClock(cfg.epoch_interval_us, cfg.epoch_origin_us)
        self._tick = 0
        self._pending: dict[EpochNumber, list[TaggedTxn]] = defaultdict(list)
        self._locals_by_epoch: dict[EpochNumber, list[TxnId]] = defaultdict(list)
        self._handles: dict[TxnId, object] = {}
        self._completed: dict[EpochNumber, MergeInput] = {}
        self._next_merge = 0
        self._deferred_seals: list[EpochNumber] = []
        self._last_sealed = -1
        self._verdict_index: dict[TxnId, TxnVerdict] = {}
        self._pending_verdicts: dict[EpochNumber, list[tuple[TxnId, TxnVerdict]]] = (
            defaultdict(list)
        )
        self._quorum_ok: set[EpochNumber] = set()
        self._epoch_timer = None
        self._recovery_timer = None
        self._push_next: dict[int, int] = {s: 0 for s in cfg.storage_ids}
        self._push_inflight: dict[int, EpochNumber | None] = {
            s: None for s in cfg.storage_ids
        }
        self._push_timers: dict[int, object] = {}
        self.broadcaster = Broadcaster(
            node_id, cfg, env, self._send_peer, self._on_quorum
        )
        self.collector = Collector(
            node_id, cfg, env, self._send_ack, self._on_collected, self._on_peer_timeout
        )
        self.stats = {
            "posted": 0,
            "immediate_aborts": 0,
            "peer_timeouts": 0,
            "merged_epochs": 0,
            "quorum_failures": 0,
        }

    # ------------------------------------------------------------ lifecycle

    def start(self, recover: bool = False) -> None:
        self._replay_local()
        if recover and self.cfg.peers_of(self.node_id):
            self._begin_recovery()
        else:
            self._activate(adopted={})

    def _replay_local(self) -> None:
        if self.log_store.base_state is not None:
            self.vt.restore_state(wire.decode_vt_state(self.log_store.base_state))
        for entry in self.log_store.all_entries():
            self.vt.apply_log(entry.log, entry.records)
            self._index_log(entry.log)
        self._next_merge = self.vt.applied_upto + 1

    def _begin_recovery(self) -> None:
        self.phase = Phase.STARTING
        req = SnapshotRequest(sender=self.node_id, have_upto=self.vt.applied_upto)
        for peer in self.cfg.peers_of(self.node_id):
            self.env.send_peer(peer, req)
        self._recovery_timer = self.env.schedule(
            self.cfg.peer_timeout_us, self._begin_recovery
        )

    def _activate(self, adopted: dict[EpochNumber, tuple[TaggedTxn, ...]]) -> None:
        if self._recovery_timer is not None:
            self._recovery_timer.cancel()
            self._recovery_timer = None
        now = self.env.now()
        self.clock.current = max(self.clock.epoch_at(now), self.vt.applied_upto + 1)
        self._last_sealed = self.vt.applied_upto
        # every epoch between the applied cursor and the current one needs a
        # terminal batch from this node: re-broadcast recovered batches
        # verbatim, or an empty one when no batch is known to exist
        for epoch in range(self.vt.applied_upto + 1, self.clock.current):
            txns = adopted.get(epoch, ())
            self._seal(epoch, txns)
        self.phase = Phase.ACTIVE
        self._arm_epoch_timer()
        self._kick_push_all()

    def halt(self, graceful: bool = False) -> None:
        """Stop participating. A graceful halt (quorum failure) aborts every
        outstanding local transaction; a hard kill stays silent."""
        if graceful:
            for txn_id in list(self._handles):
                handle = self._handles.pop(txn_id)
                self._reply_verdict(
                    handle, TxnVerdict.aborted(txn_id, AbortReason.NODE_SHUTDOWN)
                )
        self.phase = Phase.HALTED
        for timer in (self._epoch_timer, self._recovery_timer):
            if timer is not None:
                timer.cancel()
        self._epoch_timer = None
        self._recovery_timer = None
        for timer in self._push_timers.values():
            timer.cancel()
        self._push_timers.clear()
        self.broadcaster.stop()
        self.collector.stop()

    def stop_clock(self) -> None:
        """Drain mode: stop opening new epochs once the current one seals."""
        if self._epoch_timer is not None:
            self._epoch_timer.cancel()
            self._epoch_timer = None
        now = self.clock.next_boundary_us()
        while (new_epoch := self.clock.advance(now)) is not None:
            self._queue_seal(new_epoch - 1)
            break  # seal exactly the epoch in progress

    # ---------------------------------------------------------- client API

    def client_request(self, msg, handle) -> None:
        if isinstance(msg, PostTxn):
            self._post(msg.payload, handle)
        elif isinstance(msg, QueryVerdict):
            self.env.reply(
                handle,
                VerdictMessage(msg.txn_id, self._verdict_index.get(msg.txn_id)),
            )
        elif isinstance(msg, GetLatestVersion):
            self.env.reply(
                handle,
                LatestVersionResponse(msg.key, self.vt.latest_version(msg.key)),
            )
        else:
            raise TypeError(f"unexpected client message {msg!r}")

    def _post(self, payload: TxnPayload, handle) -> None:
        self.stats["posted"] += 1
        txn_id = payload.txn_id
        if self.phase != Phase.ACTIVE:
            self._reply_verdict(
                handle, TxnVerdict.aborted(txn_id, AbortReason.NODE_SHUTDOWN)
            )
            return
        known = self._verdict_index.get(txn_id)
        if known is not None:
            self._reply_verdict(handle, known)
            return
        if txn_id in self._handles:
            self._handles[txn_id] = handle  # re-post of an in-flight txn
            return
        ts = Timestamp(self.clock.current, self._next_tick(), self.node_id)
        txn = TaggedTxn(payload=payload, ts=ts)
        reason = None
        if self.cfg.early_validation:
            reason = validate_read_consistency(txn, self.vt)
            if reason is None:
                reason = validate_readset(
                    txn, self.vt, payload.isolation, exact=False
                )
        if reason is not None:
            self.stats["immediate_aborts"] += 1
            self._reply_verdict(handle, TxnVerdict.aborted(txn_id, reason))
            return
        self._pending[ts.epoch].append(txn)
        self._locals_by_epoch[ts.epoch].append(txn_id)
        self._handles[txn_id] = handle

    def _next_tick(self) -> int:
        self._tick += 1
        return self._tick

    def _reply_verdict(self, handle, verdict: TxnVerdict) -> None:
        self.env.reply(handle, VerdictMessage(verdict.txn_id, verdict))

    # -------------------------------------------------------------- epochs

    def _arm_epoch_timer(self) -> None:
        delay = max(0, self.clock.next_boundary_us() - self.env.now())
        self._epoch_timer = self.env.schedule(delay, self._on_epoch_timer)

    def _on_epoch_timer(self) -> None:
        if self.phase != Phase.ACTIVE:
            return
        now = self.env.now()
        while (new_epoch := self.clock.advance(now)) is not None:
            self._tick = 0
            self._queue_seal(new_epoch - 1)
        self._arm_epoch_timer()

    def _queue_seal(self, epoch: EpochNumber) -> None:
        if epoch <= self._last_sealed:
            return
        if self.cfg.pipelined or self._next_merge >= epoch:
            self._seal(epoch, tuple(self._pending.pop(epoch, ())))
        else:
            # synchronous mode: hold the exchange until prior merges finish
            self._deferred_seals.append(epoch)

    def _flush_deferred_seals(self) -> None:
        while self._deferred_seals and self._next_merge >= self._deferred_seals[0]:
            epoch = self._deferred_seals.pop(0)
            self._seal(epoch, tuple(self._pending.pop(epoch, ())))

    def _seal(self, epoch: EpochNumber, txns: tuple[TaggedTxn, ...]) -> None:
        self._last_sealed = max(self._last_sealed, epoch)
        if self.cfg.durable:
            self.log_store.save_sealed(epoch, txns)
        self.broadcaster.broadcast(epoch, txns)
        self.collector.add_local(epoch, txns)
        self.collector.expect(epoch)

    # ------------------------------------------------------------- peering

    def peer_message(self, msg) -> None:
        if self.phase == Phase.HALTED:
            return
        if isinstance(msg, BatchMessage):
            self.collector.on_batch(msg)
        elif isinstance(msg, AckMessage):
            self.broadcaster.on_ack(msg)
        elif isinstance(msg, SnapshotRequest):
            self._serve_snapshot(msg)
        elif isinstance(msg, SnapshotResponse):
            self._on_snapshot_response(msg)
        else:
            raise TypeError(f"unexpected peer message {msg!r}")

    def _send_peer(self, peer: NodeId, msg) -> None:
        self.env.send_peer(peer, msg)

    def _send_ack(self, peer: NodeId, ack: AckMessage) -> None:
        self.env.send_peer(peer, ack)

    def _on_peer_timeout(self, epoch: EpochNumber, missing) -> None:
        # New-epoch commits halt by construction while batches are missing;
        # the peer will recover (or the run be reconfigured) to resume.
        self.stats["peer_timeouts"] += 1

    def _serve_snapshot(self, req: SnapshotRequest) -> None:
        if req.have_upto < self.log_store.base_epoch - 1:
            base_state = wire.encode_vt_state(self.vt.snapshot_state())
            entries = ()
            upto = self.vt.applied_upto
        else:
            base_state = None
            entries = tuple(self.log_store.entries_from(req.have_upto + 1))
            upto = self.vt.applied_upto
        resp = SnapshotResponse(
            sender=self.node_id,
            upto_epoch=upto,
            base_state=base_state,
            entries=entries,
            pending=tuple(self.collector.pending_complete()),
            current_epoch=self.clock.current,
        )
        self.env.send_peer(req.sender, resp)

    def _on_snapshot_response(self, resp: SnapshotResponse) -> None:
        if self.phase == Phase.STARTING:
            self._finalize_recovery(resp)
        else:
            self._install_entries(resp.entries)
            for pb in resp.pending:
                self.collector.install(pb.node, pb.epoch, pb.txns)
            self._drain_merges()

    def _finalize_recovery(self, resp: SnapshotResponse) -> None:
        if resp.base_state is not None and resp.upto_epoch > self.vt.applied_upto:
            # too far behind for logs alone: install the compacted state
            self.vt.restore_state(wire.decode_vt_state(resp.base_state))
            self.log_store.install_base(resp.base_state, self.vt.applied_upto)
            self._next_merge = self.vt.applied_upto + 1
            for v in self.vt.snapshot_state()[3].values():
                self._verdict_index[v.txn_id] = v
        self._install_entries(resp.entries)
        adopted: dict[EpochNumber, tuple[TaggedTxn, ...]] = {}
        adopted.update(self.log_store.sealed_batches())
        for pb in resp.pending:
            if pb.node == self.node_id:
                adopted[pb.epoch] = pb.txns
            else:
                self.collector.install(pb.node, pb.epoch, pb.txns)
        self._activate(adopted=adopted)
        self._drain_merges()

    def _install_entries(self, entries) -> None:
        for entry in sorted(entries, key=lambda e: e.log.epoch):
            if entry.log.epoch != self._next_merge:
                continue
            self._commit_epoch(entry.log, entry.records, duplicates=())

    # ------------------------------------------------------------- merging

    def _on_collected(self, minput: MergeInput) -> None:
        self._completed[minput.epoch] = minput
        self._drain_merges()

    def _drain_merges(self) -> None:
        while self._next_merge in self._completed:
            minput = self._completed.pop(self._next_merge)
            if minput.epoch != self._next_merge:  # superseded by installs
                continue
            details = merge_epoch_details(minput, self.vt)
            self.stats["merged_epochs"] += 1
            self._commit_epoch(details.log, details.records, details.duplicates)
        self._flush_deferred_seals()

    def _commit_epoch(self, log, records, duplicates) -> None:
        epoch = log.epoch
        self.log_store.append(log, records)
        self.vt.apply_log(log, records)
        self.log_store.maybe_snapshot(
            lambda: wire.encode_vt_state(self.vt.snapshot_state())
        )
        self._index_log(log)
        self._next_merge = epoch + 1
        self.collector.discard(epoch)
        self.log_store.drop_sealed_upto(epoch)
        self._release_verdicts(epoch, log, duplicates)
        self._kick_push_all()

    def _index_log(self, log) -> None:
        for i, c in enumerate(log.committed):
            self._verdict_index[c.txn_id] = TxnVerdict.committed(
                c.txn_id, Version(log.epoch, i)
            )
        for a in log.aborted:
            self._verdict_index[a.txn_id] = TxnVerdict.aborted(a.txn_id, a.reason)

    def _release_verdicts(self, epoch, log, duplicates) -> None:
        outcomes: list[tuple[TxnId, TxnVerdict]] = []
        for txn_id in (
            [c.txn_id for c in log.committed]
            + [a.txn_id for a in log.aborted]
            + list(duplicates)
        ):
            if txn_id in self._handles:
                outcomes.append((txn_id, self._verdict_index[txn_id]))
        for txn_id, verdict in outcomes:
            committed = verdict.decision == Decision.COMMITTED
            if committed and not self._durably_disseminated(epoch):
                self._pending_verdicts[epoch].append((txn_id, verdict))
            else:
                handle = self._handles.pop(txn_id, None)
                if handle is not None:
                    self._reply_verdict(handle, verdict)
        self._locals_by_epoch.pop(epoch, None)

    def _durably_disseminated(self, epoch: EpochNumber) -> bool:
        # epochs merged before this node's participation (recovery installs)
        # were already replicated cluster-wide
        if epoch in self._quorum_ok or self.broadcaster.quorum_achieved(epoch):
            return True
        return epoch <= self.vt.applied_upto and epoch not in self._pending_verdicts

    def _on_quorum(self, outcome: QuorumOutcome) -> None:
        if outcome.achieved:
            self._quorum_ok.add(outcome.epoch)
            for txn_id, verdict in self._pending_verdicts.pop(outcome.epoch, ()):
                handle = self._handles.pop(txn_id, None)
                if handle is not None:
                    self._reply_verdict(handle, verdict)
        else:
            self.stats["quorum_failures"] += 1
            self._fail_epoch(outcome.epoch)

    def _fail_epoch(self, epoch: EpochNumber) -> None:
        """Own batch undeliverable: abort its transactions and stand down."""
        for txn_id in self._locals_by_epoch.pop(epoch, ()):
            handle = self._handles.pop(txn_id, None)
            if handle is not None:
                self._reply_verdict(
                    handle, TxnVerdict.aborted(txn_id, AbortReason.NODE_SHUTDOWN)
                )
        self.halt(graceful=True)

    # ------------------------------------------------------------- storage

    def storage_message(self, msg) -> None:
        if isinstance(msg, PushAck):
            sid = msg.sender
            self._push_next[sid] = max(self._push_next[sid], msg.applied_upto + 1)
            inflight = self._push_inflight[sid]
            if inflight is not None and inflight <= msg.applied_upto:
                self._push_inflight[sid] = None
                timer = self._push_timers.pop(sid, None)
                if timer is not None:
                    timer.cancel()
            self._kick_push(sid)
        else:
            raise TypeError(f"unexpected storage message {msg!r}")

    def _kick_push_all(self) -> None:
        if self.phase == Phase.HALTED:
            return
        for sid in self.cfg.storage_ids:
            self._kick_push(sid)

    def _kick_push(self, sid: int) -> None:
        if self.phase == Phase.HALTED or self._push_inflight[sid] is not None:
            return
        epoch = self._push_next[sid]
        if epoch < self.log_store.base_epoch:
            # log history starts after a snapshot; storage must already
            # hold the compacted prefix (it acked it to some node)
            epoch = self.log_store.base_epoch
            self._push_next[sid] = epoch
        entry = self.log_store.get(epoch)
        if entry is None:
            return
        self._push_inflight[sid] = epoch
        self.env.send_storage(sid, PushLog(sender=self.node_id, log=entry.log))
        retry_us = self.cfg.push_retry_mult * self.cfg.epoch_interval_us
        self._push_timers[sid] = self.env.schedule(
            retry_us, lambda: self._push_retry(sid)
        )

    def _push_retry(self, sid: int) -> None:
        epoch = self._push_inflight[sid]
        if epoch is None or self.phase == Phase.HALTED:
            return
        entry = self.log_store.get(epoch)
        if entry is not None:
            self.env.send_storage(sid, PushLog(sender=self.node_id, log=entry.log))
        retry_us = self.cfg.push_retry_mult * self.cfg.epoch_interval_us
        self._push_timers[sid] = self.env.schedule(
            retry_us, lambda: self._push_retry(sid)
        )

    # ------------------------------------------------------------- digests

    def chain_digest(self) -> bytes:
        return self.log_store.chain()

    def vt_digest(self) -> bytes:
        return self.vt.digest()

    @property
    def applied_upto(self) -> int:
        return self.vt.applied_upto
