"""Deterministic virtual-time cluster simulator.

Everything — transaction nodes, storage nodes, clients, the network — runs
on one event queue with an integer-microsecond virtual clock. Link delays
come from per-link seeded generators, so a (seed, topology, scenario) triple
replays to the byte. Frames are encoded/decoded exactly as on real sockets.

Fault scenarios are timed events: kill or restart a transaction node,
partition or heal a link. The scenario file is line-oriented text:

    # time-ms  action     args
    250        kill       1
    400        restart    1
    100        partition  0 2
    300        heal       0 2
"""

import hashlib
import heapq
import random
from dataclasses import dataclass, field

from .exchange import ClusterConfig
from .node import TaasNode
from .storage import MemoryAdaptor, ShardRange, StorageCore
from .wire import Kind, PushAck, decode_message, encode_message


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    def __init__(self):
        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Timer, object]] = []

    def schedule(self, delay_us: int, fn) -> Timer:
        timer = Timer()
        self._seq += 1
        heapq.heappush(self._heap, (self.now + max(0, delay_us), self._seq, timer, fn))
        return timer

    def step(self) -> bool:
        while self._heap:
            when, _, timer, fn = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = when
            fn()
            return True
        return False

    def run_until(self, predicate, max_time_us: int) -> bool:
        while not predicate():
            if self.now > max_time_us:
                return False
            if not self.step():
                return predicate()
        return True


@dataclass(frozen=True)
class SimParams:
    seed: int = 0
    min_delay_us: int = 100
    max_delay_us: int = 500
    post_service_us: int = 0  # per-post serial service time on a node
    trace: bool = False


class SimNet:
    """Message fabric: seeded per-link delays, partitions, optional trace."""

    def __init__(self, scheduler: Scheduler, params: SimParams):
        self.scheduler = scheduler
        self.params = params
        self._handlers: dict[tuple, object] = {}
        self._alive: set[tuple] = set()
        self._down: set[tuple[tuple, tuple]] = set()
        self._rngs: dict[tuple, random.Random] = {}
        self._busy: dict[tuple, int] = {}
        self.trace_events: list[tuple] = []

    def register(self, addr: tuple, handler) -> None:
        self._handlers[addr] = handler
        self._alive.add(addr)

    def deregister(self, addr: tuple) -> None:
        self._alive.discard(addr)

    def set_link(self, a: tuple, b: tuple, up: bool) -> None:
        for pair in ((a, b), (b, a)):
            if up:
                self._down.discard(pair)
            else:
                self._down.add(pair)

    def _rng(self, src: tuple, dst: tuple) -> random.Random:
        key = (src, dst)
        if key not in self._rngs:
            self._rngs[key] = random.Random(f"{self.params.seed}/link/{src}/{dst}")
        return self._rngs[key]

    def send(self, src: tuple, dst: tuple, msg) -> None:
        body = encode_message(msg)
        kind = Kind(body[0])
        if (src, dst) in self._down or dst not in self._alive:
            if self.params.trace:
                self.trace_events.append(
                    (self.scheduler.now, src, dst, int(kind), len(body), "drop")
                )
            return
        rng = self._rng(src, dst)
        delay = rng.randint(self.params.min_delay_us, self.params.max_delay_us)
        arrival = self.scheduler.now + delay
        if kind == Kind.POST_TXN and self.params.post_service_us:
            # serial service queue: validation work is one-at-a-time per node
            start = max(arrival, self._busy.get(dst, 0))
            arrival = start + self.params.post_service_us
            self._busy[dst] = arrival
        if self.params.trace:
            self.trace_events.append(
                (self.scheduler.now, src, dst, int(kind), len(body), "send")
            )
        delay_total = arrival - self.scheduler.now
        self.scheduler.schedule(delay_total, lambda: self._deliver(src, dst, body))

    def _deliver(self, src: tuple, dst: tuple, body: bytes) -> None:
        handler = self._handlers.get(dst)
        if handler is None or dst not in self._alive:
            return
        if self.params.trace:
            self.trace_events.append(
                (self.scheduler.now, src, dst, int(body[0]), len(body), "deliver")
            )
        handler(src, decode_message(body))

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for event in self.trace_events:
            h.update(repr(event).encode())
        return h.hexdigest()

    def message_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for event in self.trace_events:
            if event[-1] == "send":
                counts[event[3]] = counts.get(event[3], 0) + 1
        return counts


class NodeEnv:
    """Environment adapter handed to one TaasNode."""

    def __init__(self, cluster: "SimCluster", node_id: int):
        self.cluster = cluster
        self.node_id = node_id
        self.addr = ("taas", node_id)

    def now(self) -> int:
        return self.cluster.scheduler.now

    def schedule(self, delay_us: int, fn) -> Timer:
        return self.cluster.scheduler.schedule(delay_us, fn)

    def send_peer(self, node_id: int, msg) -> None:
        self.cluster.net.send(self.addr, ("taas", node_id), msg)

    def send_storage(self, storage_id: int, msg) -> None:
        self.cluster.net.send(self.addr, ("storage", storage_id), msg)

    def reply(self, handle, msg) -> None:
        self.cluster.net.send(self.addr, handle, msg)


@dataclass(frozen=True)
class FaultEvent:
    time_us: int
    action: str
    args: tuple


def parse_scenario(text: str) -> list[FaultEvent]:
    events = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        time_ms, action, args = float(parts[0]), parts[1], parts[2:]
        if action in ("kill", "restart"):
            parsed = (int(args[0]),)
        elif action in ("partition", "heal"):
            parsed = (int(args[0]), int(args[1]))
        else:
            raise ValueError(f"unknown scenario action {action!r}")
        events.append(FaultEvent(int(time_ms * 1000), action, parsed))
    return events


class SimCluster:
    def __init__(
        self,
        cfg: ClusterConfig,
        params: SimParams,
        data_dirs: dict[int, str] | None = None,
        storage_shards: dict[int, ShardRange] | None = None,
        cache_bytes: int = 0,
    ):
        self.cfg = cfg
        self.params = params
        self.scheduler = Scheduler()
        self.net = SimNet(self.scheduler, params)
        self.data_dirs = data_dirs or {}
        self.nodes: dict[int, TaasNode] = {}
        self.storage: dict[int, StorageCore] = {}
        for sid in cfg.storage_ids:
            shard = (storage_shards or {}).get(sid, ShardRange())
            adaptor = MemoryAdaptor(shard=shard, cache_bytes=cache_bytes)
            core = StorageCore(sid, adaptor)
            self.storage[sid] = core
            self.net.register(
                ("storage", sid),
                lambda src, msg, core=core: self._storage_dispatch(core, src, msg),
            )
        for node_id in cfg.taas_ids:
            self._spawn_node(node_id, recover=False)

    # ------------------------------------------------------------ plumbing

    def _spawn_node(self, node_id: int, recover: bool) -> TaasNode:
        env = NodeEnv(self, node_id)
        node = TaasNode(
            node_id, self.cfg, env, data_dir=self.data_dirs.get(node_id)
        )
        self.nodes[node_id] = node
        self.net.register(
            ("taas", node_id),
            lambda src, msg, node_id=node_id: self._taas_dispatch(node_id, src, msg),
        )
        node.start(recover=recover)
        return node

    def _taas_dispatch(self, node_id: int, src: tuple, msg) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        if src[0] == "taas":
            node.peer_message(msg)
        elif src[0] == "storage":
            node.storage_message(msg)
        else:
            node.client_request(msg, handle=src)

    def _storage_dispatch(self, core: StorageCore, src: tuple, msg) -> None:
        reply = core.handle(msg)
        if reply is not None:
            self.net.send(("storage", core.storage_id), src, reply)

    # -------------------------------------------------------------- faults

    def kill_taas(self, node_id: int) -> None:
        node = self.nodes.pop(node_id, None)
        if node is not None:
            node.halt()
            node.log_store.close()
        self.net.deregister(("taas", node_id))

    def restart_taas(self, node_id: int) -> TaasNode:
        return self._spawn_node(node_id, recover=True)

    def apply_scenario(self, events: list[FaultEvent]) -> None:
        for event in events:
            delay = max(0, event.time_us - self.scheduler.now)
            self.scheduler.schedule(delay, lambda e=event: self._run_fault(e))

    def _run_fault(self, event: FaultEvent) -> None:
        if event.action == "kill":
            self.kill_taas(event.args[0])
        elif event.action == "restart":
            self.restart_taas(event.args[0])
        elif event.action == "partition":
            a, b = event.args
            self.net.set_link(("taas", a), ("taas", b), up=False)
        elif event.action == "heal":
            a, b = event.args
            self.net.set_link(("taas", a), ("taas", b), up=True)

    # ------------------------------------------------------------- running

    def alive_nodes(self) -> list[TaasNode]:
        return [self.nodes[n] for n in sorted(self.nodes)]

    def quiesced(self, upto_epoch: int) -> bool:
        nodes = self.alive_nodes()
        if not nodes:
            return True
        if any(node.applied_upto < upto_epoch for node in nodes):
            return False
        return all(
            core.adaptor.applied_upto() >= upto_epoch
            for core in self.storage.values()
        )

    def drain(self, max_time_us: int) -> bool:
        """Let merges and storage pushes catch up, then stop all clocks."""
        target = max(node._last_sealed for node in self.alive_nodes())
        target = max(
            target,
            max(node.clock.current for node in self.alive_nodes()),
        )
        ok = self.scheduler.run_until(
            lambda: self.quiesced(target), max_time_us=max_time_us
        )
        for node in self.alive_nodes():
            node.halt()
        while self.scheduler.step():
            pass
        return ok

    def log_chain_digests(self) -> dict[int, str]:
        return {n: node.chain_digest().hex() for n, node in sorted(self.nodes.items())}

    def vt_digests(self) -> dict[int, str]:
        return {n: node.vt_digest().hex() for n, node in sorted(self.nodes.items())}

    def storage_digests(self) -> dict[int, str]:
        return {
            sid: core.adaptor.state_digest().hex()
            for sid, core in sorted(self.storage.items())
        }
