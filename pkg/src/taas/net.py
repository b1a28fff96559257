"""Socket runtime: length-prefixed frames over TCP, dispatch loops, servers.

Each server runs one dispatcher thread that owns all node state; listener
and per-connection reader threads only enqueue events. Outbound peer and
storage connections reconnect lazily, so a restarted process resumes where
retransmission left off. The node logic itself is identical to simulation —
only this environment differs.
"""

import queue
import socket
import struct
import threading
import time

from .exchange import ClusterConfig
from .node import TaasNode
from .storage import MemoryAdaptor, ShardRange, StorageCore
from .wire import FRAME_HEADER, decode_message, encode_message

_LEN = struct.Struct(">I")


def send_frame(sock: socket.socket, msg) -> None:
    body = encode_message(msg)
    sock.sendall(_LEN.pack(len(body)) + body)


def recv_frame(sock: socket.socket):
    header = _recv_exact(sock, FRAME_HEADER)
    if header is None:
        return None
    size = _LEN.unpack(header)[0]
    body = _recv_exact(sock, size)
    if body is None:
        return None
    return decode_message(body)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


class Outbound:
    """Lazily connected, auto-reconnecting frame sender to one address.

    With `on_reply` set, a reader thread pumps response frames back to the
    callback (used for node -> storage connections, where acks return over
    the same stream).
    """

    def __init__(self, address: tuple[str, int], on_reply=None):
        self.address = address
        self.on_reply = on_reply
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def send(self, msg) -> bool:
        with self._lock:
            for _ in range(2):
                if self._sock is None:
                    try:
                        self._sock = socket.create_connection(
                            self.address, timeout=5
                        )
                    except OSError:
                        self._sock = None
                        return False
                    if self.on_reply is not None:
                        threading.Thread(
                            target=self._pump, args=(self._sock,), daemon=True
                        ).start()
                try:
                    send_frame(self._sock, msg)
                    return True
                except OSError:
                    try:
                        self._sock.close()
                    except OSError:
                        pass
                    self._sock = None
            return False

    def _pump(self, sock: socket.socket) -> None:
        while True:
            msg = recv_frame(sock)
            if msg is None:
                return
            self.on_reply(msg)

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = None


class DispatchLoop:
    """Single-threaded event loop: queued events plus monotonic timers."""

    class Timer:
        __slots__ = ("deadline", "fn", "cancelled")

        def __init__(self, deadline, fn):
            self.deadline = deadline
            self.fn = fn
            self.cancelled = False

        def cancel(self):
            self.cancelled = True

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()
        self._timers: list[DispatchLoop.Timer] = []
        self._lock = threading.Lock()
        self._running = False
        self._thread: threading.Thread | None = None

    def now(self) -> int:
        # wall clock: epoch numbering must agree across processes
        return time.time_ns() // 1000

    def schedule(self, delay_us: int, fn) -> "DispatchLoop.Timer":
        timer = self.Timer(self.now() + max(0, delay_us), fn)
        with self._lock:
            self._timers.append(timer)
        self._queue.put(None)  # wake the loop to recompute the deadline
        return timer

    def post(self, fn) -> None:
        self._queue.put(fn)

    def start(self, name: str) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        self._queue.put(None)
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _due_timers(self):
        now = self.now()
        due, rest = [], []
        with self._lock:
            for t in self._timers:
                if t.cancelled:
                    continue
                (due if t.deadline <= now else rest).append(t)
            self._timers = rest
            next_deadline = min((t.deadline for t in rest), default=None)
        return due, next_deadline

    def _run(self) -> None:
        while self._running:
            due, next_deadline = self._due_timers()
            for timer in due:
                if not timer.cancelled:
                    timer.fn()
            timeout = 0.05
            if next_deadline is not None:
                timeout = min(timeout, max(0.0, (next_deadline - self.now()) / 1e6))
            try:
                fn = self._queue.get(timeout=timeout)
            except queue.Empty:
                continue
            if fn is not None and self._running:
                fn()


class _Listener:
    def __init__(self, address, on_message):
        # on_message(reply_sender, msg) runs on a reader thread
        self.on_message = on_message
        self._sock = socket.create_server(address)
        self._threads: list[threading.Thread] = []
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept, daemon=True)
        self._accept_thread.start()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def _accept(self) -> None:
        while self._running:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            self._threads.append(t)
            t.start()

    def _reader(self, conn: socket.socket) -> None:
        lock = threading.Lock()

        def reply(msg):
            with lock:
                try:
                    send_frame(conn, msg)
                except OSError:
                    pass

        while self._running:
            msg = recv_frame(conn)
            if msg is None:
                break
            self.on_message(reply, msg)
        try:
            conn.close()
        except OSError:
            pass

    def close(self) -> None:
        self._running = False
        try:
            self._sock.close()
        except OSError:
            pass


class LiveEnv:
    """Socket-backed node environment; all handlers run on the dispatch loop."""

    def __init__(self, cfg: ClusterConfig, loop: DispatchLoop, on_storage_reply=None):
        self.cfg = cfg
        self.loop = loop
        self._peers = {
            n: Outbound(tuple(addr)) for n, addr in cfg.taas_addresses.items()
        }
        self._storage = {
            s: Outbound(tuple(addr), on_reply=on_storage_reply)
            for s, addr in cfg.storage_addresses.items()
        }

    def now(self) -> int:
        return self.loop.now()

    def schedule(self, delay_us: int, fn):
        return self.loop.schedule(delay_us, fn)

    def send_peer(self, node_id, msg) -> None:
        out = self._peers.get(node_id)
        if out is not None:
            out.send(msg)

    def send_storage(self, storage_id, msg) -> None:
        out = self._storage.get(storage_id)
        if out is not None:
            out.send(msg)

    def reply(self, handle, msg) -> None:
        handle(msg)

    def close(self) -> None:
        for out in self._peers.values():
            out.close()
        for out in self._storage.values():
            out.close()


class NodeServer:
    """One transaction node bound to a socket address."""

    def __init__(self, node_id: int, cfg: ClusterConfig, data_dir: str | None = None):
        from .wire import AckMessage, BatchMessage, PushAck, SnapshotRequest, SnapshotResponse

        self._peer_kinds = (AckMessage, BatchMessage, SnapshotRequest, SnapshotResponse)
        self._storage_kinds = (PushAck,)
        self.node_id = node_id
        self.cfg = cfg
        self.loop = DispatchLoop()
        self.env = LiveEnv(
            cfg,
            self.loop,
            on_storage_reply=lambda msg: self.loop.post(
                lambda: self.node.storage_message(msg)
            ),
        )
        self.node = TaasNode(node_id, cfg, self.env, data_dir=data_dir)
        host, port = cfg.taas_addresses[node_id]
        self.listener = _Listener((host, port), self._on_message)

    def _on_message(self, reply, msg) -> None:
        if isinstance(msg, self._peer_kinds):
            self.loop.post(lambda: self.node.peer_message(msg))
        elif isinstance(msg, self._storage_kinds):
            self.loop.post(lambda: self.node.storage_message(msg))
        else:
            self.loop.post(lambda: self.node.client_request(msg, handle=reply))

    def start(self, recover: bool = False) -> None:
        self.loop.start(name=f"taas-node-{self.node_id}")
        self.loop.post(lambda: self.node.start(recover=recover))

    def stop(self) -> None:
        self.node.halt()
        self.listener.close()
        self.loop.stop()
        self.env.close()
        self.node.log_store.close()


class StorageServer:
    def __init__(
        self,
        storage_id: int,
        cfg: ClusterConfig,
        shard: ShardRange | None = None,
        cache_bytes: int = 0,
        persist_path: str | None = None,
    ):
        self.storage_id = storage_id
        self.adaptor = MemoryAdaptor(
            shard=shard, cache_bytes=cache_bytes, persist_path=persist_path
        )
        self.core = StorageCore(storage_id, self.adaptor)
        self._lock = threading.Lock()
        host, port = cfg.storage_addresses[storage_id]
        self.listener = _Listener((host, port), self._on_message)

    def _on_message(self, reply, msg) -> None:
        with self._lock:
            response = self.core.handle(msg)
        if response is not None:
            reply(response)

    def stop(self) -> None:
        self.listener.close()
        self.adaptor.close()


class LiveClient:
    """Blocking client over sockets: storage reads plus transaction posts."""

    def __init__(self, cfg: ClusterConfig, origin: int, rng=None, timeout_s: float = 10.0):
        import random as _random

        from .client import RandomRouter, TxnIdAllocator

        self.cfg = cfg
        self.timeout_s = timeout_s
        self.alloc = TxnIdAllocator(origin=origin)
        self.router = RandomRouter(cfg.taas_ids, rng or _random.Random(origin))
        self._taas = {n: Outbound(tuple(a)) for n, a in cfg.taas_addresses.items()}
        self._storage = {
            s: Outbound(tuple(a)) for s, a in cfg.storage_addresses.items()
        }
        self._shards: list[tuple[int, ShardRange]] | None = None

    # ----------------------------------------------------------- storage IO

    def _storage_request(self, sid: int, msg):
        out = self._storage[sid]
        deadline = time.monotonic() + self.timeout_s
        while time.monotonic() < deadline:
            if out.send(msg):
                try:
                    response = recv_frame(out._sock)
                except OSError:
                    response = None
                if response is not None:
                    return response
                out.close()
            time.sleep(0.05)
        raise TimeoutError(f"storage {sid} unreachable")

    def _load_shards(self) -> None:
        import json

        from .wire import GetMeta

        sid = self.cfg.storage_ids[0]
        resp = self._storage_request(sid, GetMeta("shards"))
        if not resp.found:
            self._shards = [(sid, ShardRange())]
            return
        doc = json.loads(resp.blob)
        self._shards = [
            (
                entry["id"],
                ShardRange(
                    start=entry["start"].encode("latin1") or None,
                    end=entry["end"].encode("latin1") or None,
                ),
            )
            for entry in doc
        ]

    def get_data(self, key: bytes):
        from .model import VersionedRecord
        from .wire import GetData

        if self._shards is None:
            self._load_shards()
        for sid, shard in self._shards:
            if shard.contains(key):
                resp = self._storage_request(sid, GetData(key))
                if not resp.found:
                    return None
                return VersionedRecord(key=key, value=resp.value, version=resp.version)
        return None

    def get_meta(self, name: str) -> bytes | None:
        from .wire import GetMeta

        resp = self._storage_request(self.cfg.storage_ids[0], GetMeta(name))
        return resp.blob if resp.found else None

    # -------------------------------------------------------------- commits

    def session(self, isolation=None, consistency=None):
        from .client import TxnSession

        return TxnSession(
            self.alloc.allocate(),
            self,
            isolation if isolation is not None else self.cfg.isolation_default,
            consistency if consistency is not None else self.cfg.consistency_default,
        )

    def composite(self, isolation=None, consistency=None):
        from .client import CompositeTxn

        return CompositeTxn(
            txn_id=self.alloc.allocate(),
            isolation=isolation if isolation is not None else self.cfg.isolation_default,
            consistency=(
                consistency if consistency is not None else self.cfg.consistency_default
            ),
            source=self,
        )

    def commit(self, session, labels=()):
        payload = session.build_payload(labels)
        verdict = self.post_payload(payload)
        session.decide(verdict)
        return verdict

    def commit_composite(self, composite):
        payload = composite.build_payload()
        verdict = self.post_payload(payload)
        for _, sub in composite.subs:
            sub.decide(verdict)
        return verdict

    def post_payload(self, payload):
        """Post, awaiting the verdict; retries identical payload elsewhere on
        silence, resolving ambiguity through verdict queries."""
        from .wire import PostTxn, QueryVerdict, VerdictMessage

        last = None
        deadline = time.monotonic() + self.timeout_s
        attempt = 0
        while time.monotonic() < deadline:
            attempt += 1
            node = self.router.pick(exclude=last)
            last = node
            out = self._taas[node]
            if not out.send(PostTxn(payload)):
                continue
            try:
                response = recv_frame(out._sock)
            except OSError:
                response = None
            if isinstance(response, VerdictMessage) and response.verdict is not None:
                return response.verdict
            out.close()
            # ambiguous: ask any node for the recorded outcome
            for peer in self.cfg.taas_ids:
                peer_out = self._taas[peer]
                if peer_out.send(QueryVerdict(payload.txn_id)):
                    try:
                        answer = recv_frame(peer_out._sock)
                    except OSError:
                        answer = None
                    if isinstance(answer, VerdictMessage) and answer.verdict is not None:
                        return answer.verdict
                    peer_out.close()
        raise TimeoutError(f"no verdict for {payload.txn_id} after {attempt} attempts")

    def latest_version(self, key: bytes):
        from .wire import GetLatestVersion, LatestVersionResponse

        node = self.router.pick()
        out = self._taas[node]
        if out.send(GetLatestVersion(key)):
            resp = recv_frame(out._sock)
            if isinstance(resp, LatestVersionResponse):
                return resp.version
        return None

    def close(self) -> None:
        for out in self._taas.values():
            out.close()
        for out in self._storage.values():
            out.close()


class LiveCluster:
    """In-process live cluster: every node is a thread serving real sockets."""

    def __init__(self, cfg: ClusterConfig, data_dirs: dict[int, str] | None = None):
        self.cfg = cfg
        self.data_dirs = data_dirs or {}
        self.storage_servers: dict[int, StorageServer] = {}
        self.node_servers: dict[int, NodeServer] = {}

    def start(self) -> None:
        from .bench import shard_map_blob, shard_ranges

        ranges = shard_ranges(len(self.cfg.storage_ids))
        blob = shard_map_blob(ranges)
        for sid in self.cfg.storage_ids:
            server = StorageServer(sid, self.cfg, shard=ranges[sid])
            server.adaptor.register_meta("shards", blob)
            self.storage_servers[sid] = server
        for node_id in self.cfg.taas_ids:
            server = NodeServer(node_id, self.cfg, data_dir=self.data_dirs.get(node_id))
            self.node_servers[node_id] = server
            server.start(recover=False)

    def kill_node(self, node_id: int) -> None:
        server = self.node_servers.pop(node_id, None)
        if server is not None:
            server.stop()

    def restart_node(self, node_id: int) -> NodeServer:
        server = NodeServer(node_id, self.cfg, data_dir=self.data_dirs.get(node_id))
        self.node_servers[node_id] = server
        server.start(recover=True)
        return server

    def stop(self) -> None:
        for server in list(self.node_servers.values()):
            server.stop()
        self.node_servers.clear()
        for server in self.storage_servers.values():
            server.stop()
        self.storage_servers.clear()


def free_ports(n: int) -> list[int]:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def local_config(
    n_taas: int,
    n_storage: int = 1,
    epoch_us: int = 10_000,
    **overrides,
) -> ClusterConfig:
    ports = free_ports(n_taas + n_storage)
    return ClusterConfig(
        taas_ids=tuple(range(n_taas)),
        storage_ids=tuple(range(n_storage)),
        taas_addresses={i: ("127.0.0.1", ports[i]) for i in range(n_taas)},
        storage_addresses={
            s: ("127.0.0.1", ports[n_taas + s]) for s in range(n_storage)
        },
        epoch_interval_us=epoch_us,
        epoch_origin_us=time.time_ns() // 1000,
        **overrides,
    )
