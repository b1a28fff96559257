"""Node-local epoch log persistence: segments, digest chain, snapshots.

The store is an append-only, gap-free sequence of (epoch log, merge records)
entries with a running digest chain. On disk, one segment file holds a fixed
number of epochs, each entry framed and followed by its chain digest;
a version-table snapshot is written every `snapshot_every` epochs so a
restoring peer needs only the snapshot plus tail entries. In-memory mode
(data_dir=None) keeps the same structure without files.
"""

import os
import re

from . import codec, wire
from .model import EpochLog
from .wire import LogEntryWire

_SEGMENT_RE = re.compile(r"^seg-(\d+)\.log$")
_SNAPSHOT_RE = re.compile(r"^snap-(\d+)\.bin$")
_SEALED_RE = re.compile(r"^sealed-(\d+)\.bin$")


class LogStore:
    def __init__(
        self,
        data_dir: str | None = None,
        segment_epochs: int = 64,
        snapshot_every: int = 64,
        fsync: bool = False,
    ):
        self.data_dir = data_dir
        self.segment_epochs = segment_epochs
        self.snapshot_every = snapshot_every
        self.fsync = fsync
        self.base_epoch = 0  # first epoch held; > 0 after snapshot install
        self.base_state: bytes | None = None  # vt state as of base_epoch - 1
        self._entries: list[tuple[LogEntryWire, bytes]] = []  # with chain digest
        self._segment_fh = None
        self._segment_start = None
        self._sealed: dict[int, tuple] = {}
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            self._load()

    # ------------------------------------------------------------- loading

    def _load(self) -> None:
        snaps = []
        segments = []
        for name in os.listdir(self.data_dir):
            m = _SNAPSHOT_RE.match(name)
            if m:
                snaps.append(int(m.group(1)))
            m = _SEGMENT_RE.match(name)
            if m:
                segments.append(int(m.group(1)))
            m = _SEALED_RE.match(name)
            if m:
                epoch = int(m.group(1))
                with open(os.path.join(self.data_dir, name), "rb") as fh:
                    data = fh.read()
                r = codec.Reader(data)
                txns = tuple(codec.read_tagged_txn(r) for _ in range(r.u32()))
                self._sealed[epoch] = txns

        snaps.sort()
        base_applied = -1
        if snaps:
            with open(
                os.path.join(self.data_dir, f"snap-{snaps[-1]}.bin"), "rb"
            ) as fh:
                self.base_state = fh.read()
            base_applied = snaps[-1]
            self.base_epoch = base_applied + 1

        chain = b""
        for start in sorted(s for s in segments):
            if start + self.segment_epochs <= self.base_epoch:
                continue
            path = os.path.join(self.data_dir, f"seg-{start}.log")
            with open(path, "rb") as fh:
                data = fh.read()
            pos = 0
            while pos + 4 <= len(data):
                size = int.from_bytes(data[pos : pos + 4], "big")
                end = pos + 4 + size + codec.DIGEST_SIZE
                if end > len(data):
                    break  # torn tail
                entry = wire.decode_log_entry(data[pos + 4 : pos + 4 + size])
                entry_chain = data[pos + 4 + size : end]
                pos = end
                epoch = entry.log.epoch
                if epoch < self.base_epoch:
                    continue
                if epoch != self.next_epoch():
                    break  # gap: ignore anything beyond it
                if self._entries:
                    expect = codec.chain_digest(self._entries[-1][1], entry.log.digest)
                elif self.base_epoch == 0:
                    expect = codec.chain_digest(b"", entry.log.digest)
                else:
                    expect = entry_chain  # chain seeded before the snapshot
                if expect != entry_chain:
                    break
                self._entries.append((entry, entry_chain))
            chain = self._entries[-1][1] if self._entries else chain

    # ------------------------------------------------------------ appending

    def next_epoch(self) -> int:
        return self.base_epoch + len(self._entries)

    @property
    def last_epoch(self) -> int:
        return self.next_epoch() - 1

    def chain(self) -> bytes:
        return self._entries[-1][1] if self._entries else b""

    def append(self, log: EpochLog, records: tuple = ()) -> None:
        if log.epoch != self.next_epoch():
            raise ValueError(
                f"log store expects epoch {self.next_epoch()}, got {log.epoch}"
            )
        chain = codec.chain_digest(self.chain(), log.digest)
        entry = LogEntryWire(log=log, records=records)
        self._entries.append((entry, chain))
        if self.data_dir:
            self._persist(entry, chain)

    def _persist(self, entry: LogEntryWire, chain: bytes) -> None:
        epoch = entry.log.epoch
        seg_start = (epoch // self.segment_epochs) * self.segment_epochs
        if self._segment_fh is None or seg_start != self._segment_start:
            if self._segment_fh is not None:
                self._segment_fh.close()
            path = os.path.join(self.data_dir, f"seg-{seg_start}.log")
            self._segment_fh = open(path, "ab")
            self._segment_start = seg_start
        body = wire.encode_log_entry(entry)
        self._segment_fh.write(len(body).to_bytes(4, "big") + body + chain)
        self._segment_fh.flush()
        if self.fsync:
            os.fsync(self._segment_fh.fileno())

    def maybe_snapshot(self, vt_state_bytes_fn) -> None:
        """Persist a version-table snapshot every `snapshot_every` epochs."""
        if not self.data_dir:
            return
        epoch = self.last_epoch
        if epoch >= 0 and (epoch + 1) % self.snapshot_every == 0:
            path = os.path.join(self.data_dir, f"snap-{epoch}.bin")
            with open(path, "wb") as fh:
                fh.write(vt_state_bytes_fn())
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())

    # -------------------------------------------------------------- sealed

    def save_sealed(self, epoch: int, txns: tuple) -> None:
        """Durably record a sealed batch before it is first broadcast."""
        self._sealed[epoch] = txns
        if not self.data_dir:
            return
        w = codec.Writer()
        w.u32(len(txns))
        for t in txns:
            codec.write_tagged_txn(w, t)
        path = os.path.join(self.data_dir, f"sealed-{epoch}.bin")
        with open(path, "wb") as fh:
            fh.write(w.getvalue())
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def sealed_batches(self) -> dict[int, tuple]:
        return dict(self._sealed)

    def drop_sealed_upto(self, epoch: int) -> None:
        for e in [e for e in self._sealed if e <= epoch]:
            del self._sealed[e]
            if self.data_dir:
                path = os.path.join(self.data_dir, f"sealed-{e}.bin")
                if os.path.exists(path):
                    os.remove(path)

    # -------------------------------------------------------------- access

    def get(self, epoch: int) -> LogEntryWire | None:
        idx = epoch - self.base_epoch
        if 0 <= idx < len(self._entries):
            return self._entries[idx][0]
        return None

    def entries_from(self, epoch: int) -> list[LogEntryWire]:
        start = max(epoch, self.base_epoch)
        idx = start - self.base_epoch
        return [e for e, _ in self._entries[idx:]]

    def all_entries(self) -> list[LogEntryWire]:
        return [e for e, _ in self._entries]

    def chain_at(self, epoch: int) -> bytes | None:
        idx = epoch - self.base_epoch
        if 0 <= idx < len(self._entries):
            return self._entries[idx][1]
        return None

    def install_base(self, state_bytes: bytes, applied_epoch: int) -> None:
        """Reset the store to start after a snapshot at `applied_epoch`."""
        if self._entries:
            raise ValueError("cannot install a base over existing entries")
        self.base_state = state_bytes
        self.base_epoch = applied_epoch + 1
        if self.data_dir:
            path = os.path.join(self.data_dir, f"snap-{applied_epoch}.bin")
            with open(path, "wb") as fh:
                fh.write(state_bytes)

    def close(self) -> None:
        if self._segment_fh is not None:
            self._segment_fh.close()
            self._segment_fh = None
