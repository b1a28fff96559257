"""Storage tier: a versioned key-value store updated only by replaying epoch logs.

The adaptor interface is the seam for alternative backends; the bundled
implementation is an in-memory map with optional append-only persistence,
a read-through cache, and static key-range sharding. Log application is
idempotent per epoch and strictly ordered, so pushes may be duplicated or
retried freely as long as they arrive gap-free.
"""

import hashlib
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass

from . import codec
from .model import EpochGap, EpochLog, VersionedRecord, Version
from .wire import (
    DataResponse,
    GetData,
    GetMeta,
    MetaResponse,
    PushAck,
    PushLog,
)


class UnknownMeta(KeyError):
    pass


@dataclass(frozen=True)
class ShardRange:
    """Half-open key range [start, end); None bounds are open."""

    start: bytes | None = None
    end: bytes | None = None

    def contains(self, key: bytes) -> bool:
        if self.start is not None and key < self.start:
            return False
        if self.end is not None and key >= self.end:
            return False
        return True

    @classmethod
    def parse(cls, text: str) -> "ShardRange":
        """Parse "start:end" with empty sides meaning open bounds."""
        start_s, _, end_s = text.partition(":")
        return cls(
            start=start_s.encode() if start_s else None,
            end=end_s.encode() if end_s else None,
        )


class LruCache:
    """Bounded read-through cache with per-key invalidation and hit counters."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self._entries: OrderedDict[bytes, VersionedRecord] = OrderedDict()
        self._size = 0
        self.hits = 0
        self.misses = 0

    def _weight(self, rec: VersionedRecord) -> int:
        return len(rec.key) + (len(rec.value) if rec.value else 0) + 16

    def get(self, key: bytes) -> VersionedRecord | None:
        rec = self._entries.get(key)
        if rec is None:
            self.misses += 1
            return None
        self._entries.move_to_end(key)
        self.hits += 1
        return rec

    def put(self, rec: VersionedRecord) -> None:
        if rec.key in self._entries:
            self._size -= self._weight(self._entries.pop(rec.key))
        self._entries[rec.key] = rec
        self._size += self._weight(rec)
        while self._size > self.capacity and self._entries:
            _, evicted = self._entries.popitem(last=False)
            self._size -= self._weight(evicted)

    def invalidate(self, key: bytes) -> None:
        rec = self._entries.pop(key, None)
        if rec is not None:
            self._size -= self._weight(rec)


class MemoryAdaptor:
    """Ordered in-memory adaptor with optional append-only log persistence.

    apply_epoch is single-writer; reads take the same lock, so a read racing
    an apply sees either the pre- or post-apply record, never a torn one.
    """

    def __init__(
        self,
        shard: ShardRange | None = None,
        cache_bytes: int = 0,
        persist_path: str | None = None,
    ):
        self.shard = shard or ShardRange()
        self.cache = LruCache(cache_bytes) if cache_bytes > 0 else None
        self._data: dict[bytes, VersionedRecord] = {}
        self._meta: dict[str, bytes] = {}
        self._applied: int = -1
        self._lock = threading.Lock()
        self._persist_path = persist_path
        self._persist_fh = None
        if persist_path:
            self._recover_from_file()
            self._persist_fh = open(persist_path, "ab")

    def _recover_from_file(self) -> None:
        if not os.path.exists(self._persist_path):
            return
        with open(self._persist_path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos + 4 <= len(data):
            size = int.from_bytes(data[pos : pos + 4], "big")
            if pos + 4 + size > len(data):
                break  # torn tail from a crash mid-append
            log = codec.decode_epoch_log(data[pos + 4 : pos + 4 + size])
            self._apply_locked(log)
            pos += 4 + size

    def applied_upto(self) -> int:
        return self._applied

    def apply_epoch(self, log: EpochLog) -> int:
        with self._lock:
            if log.epoch <= self._applied:
                return self._applied  # duplicate push: already applied
            if log.epoch > self._applied + 1:
                raise EpochGap(
                    f"push for epoch {log.epoch}, applied up to {self._applied}"
                )
            self._apply_locked(log)
            if self._persist_fh is not None:
                encoded = codec.encode_epoch_log(log)
                self._persist_fh.write(len(encoded).to_bytes(4, "big") + encoded)
                self._persist_fh.flush()
            return self._applied

    def _apply_locked(self, log: EpochLog) -> None:
        for i, c in enumerate(log.committed):
            version = Version(log.epoch, i)
            for w in c.writes:
                if not self.shard.contains(w.key):
                    continue
                self._data[w.key] = VersionedRecord(w.key, w.value, version)
                if self.cache is not None:
                    self.cache.invalidate(w.key)
        self._applied = log.epoch

    def get_data(self, key: bytes) -> VersionedRecord | None:
        with self._lock:
            if self.cache is not None:
                rec = self.cache.get(key)
                if rec is not None:
                    return rec
            rec = self._data.get(key)
            if rec is not None and self.cache is not None:
                self.cache.put(rec)
            return rec

    def register_meta(self, name: str, blob: bytes) -> None:
        self._meta[name] = blob

    def get_meta(self, name: str) -> bytes:
        try:
            return self._meta[name]
        except KeyError:
            raise UnknownMeta(name) from None

    def state_digest(self) -> bytes:
        """Digest over the sorted key -> (value, version) map."""
        with self._lock:
            h = hashlib.sha256()
            h.update(self._applied.to_bytes(8, "big", signed=True))
            for key in sorted(self._data):
                rec = self._data[key]
                h.update(len(key).to_bytes(4, "big"))
                h.update(key)
                if rec.value is None:
                    h.update(b"\x00")
                else:
                    h.update(b"\x01")
                    h.update(len(rec.value).to_bytes(4, "big"))
                    h.update(rec.value)
                h.update(rec.version.epoch.to_bytes(8, "big"))
                h.update(rec.version.index.to_bytes(4, "big"))
            return h.digest()

    def close(self) -> None:
        if self._persist_fh is not None:
            self._persist_fh.close()
            self._persist_fh = None


class StorageCore:
    """Message-level storage node logic, shared by the simulator and servers."""

    def __init__(self, storage_id: int, adaptor: MemoryAdaptor):
        self.storage_id = storage_id
        self.adaptor = adaptor

    def handle(self, msg):
        if isinstance(msg, PushLog):
            try:
                applied = self.adaptor.apply_epoch(msg.log)
            except EpochGap:
                applied = self.adaptor.applied_upto()
            return PushAck(sender=self.storage_id, applied_upto=applied)
        if isinstance(msg, GetData):
            rec = self.adaptor.get_data(msg.key)
            if rec is None:
                return DataResponse(key=msg.key, found=False)
            return DataResponse(
                key=msg.key, found=True, value=rec.value, version=rec.version
            )
        if isinstance(msg, GetMeta):
            try:
                blob = self.adaptor.get_meta(msg.name)
            except UnknownMeta:
                return MetaResponse(name=msg.name, found=False)
            return MetaResponse(name=msg.name, found=True, blob=blob)
        raise TypeError(f"storage cannot handle {msg!r}")
