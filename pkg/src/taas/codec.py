"""Canonical binary encoding for every value that crosses a process boundary.

The same byte layout backs the wire protocol, the on-disk epoch logs, and the
cross-node digests, so it must be bit-exact everywhere. Layout rules:

    u8/u32/u64     unsigned big-endian integers
    bytes          u32 length prefix + raw bytes
    option(X)      0x00, or 0x01 + X
    list(X)        u32 count + items
    TxnId          u32 origin + u64 seq
    Timestamp      u64 epoch + u64 tick + u32 node
    Version        u64 epoch + u32 index
    ReadEntry      bytes key + option(Version)
    WriteEntry     bytes key + option(bytes value)
    TxnPayload     TxnId + u8 isolation + u8 consistency
                   + list(ReadEntry) + list(WriteEntry) + list(bytes label)
    TaggedTxn      TxnPayload + Timestamp
    TxnVerdict     TxnId + u8 decision + u8 reason (0 = none) + option(Version)
    EpochLog body  u64 epoch + list(committed) + list(aborted)
      committed    TxnId + Timestamp + list(WriteEntry), sorted by Timestamp
      aborted      TxnId + u8 reason, sorted by TxnId
    EpochLog       body + 32-byte sha256(body) digest

Fields are written in declaration order and lists are canonically sorted
before encoding, so structurally equal values always encode identically.
"""

import hashlib
import struct
from io import BytesIO

from .model import (
    AbortedTxn,
    AbortReason,
    CommittedTxn,
    ConsistencyMode,
    Decision,
    EpochLog,
    EpochNumber,
    IsolationLevel,
    ReadEntry,
    TaggedTxn,
    Timestamp,
    TxnId,
    TxnPayload,
    TxnVerdict,
    Version,
    WriteEntry,
)

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

DIGEST_SIZE = 32


class DecodeError(Exception):
    pass


class Writer:
    def __init__(self) -> None:
        self._buf = BytesIO()

    def u8(self, v: int) -> None:
        self._buf.write(_U8.pack(v))

    def u32(self, v: int) -> None:
        self._buf.write(_U32.pack(v))

    def u64(self, v: int) -> None:
        self._buf.write(_U64.pack(v))

    def raw(self, b: bytes) -> None:
        self._buf.write(b)

    def bytes_(self, b: bytes) -> None:
        self.u32(len(b))
        self._buf.write(b)

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError("truncated input")
        chunk = self._data[self._pos : end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def done(self) -> bool:
        return self._pos == len(self._data)

    def expect_done(self) -> None:
        if not self.done():
            raise DecodeError("trailing bytes after value")


def _write_option(w: Writer, value, write_fn) -> None:
    if value is None:
        w.u8(0)
    else:
        w.u8(1)
        write_fn(w, value)


def _read_option(r: Reader, read_fn):
    flag = r.u8()
    if flag == 0:
        return None
    if flag != 1:
        raise DecodeError("bad option flag")
    return read_fn(r)


def write_txn_id(w: Writer, t: TxnId) -> None:
    w.u32(t.origin)
    w.u64(t.seq)


def read_txn_id(r: Reader) -> TxnId:
    return TxnId(origin=r.u32(), seq=r.u64())


def write_timestamp(w: Writer, ts: Timestamp) -> None:
    w.u64(ts.epoch)
    w.u64(ts.tick)
    w.u32(ts.node)


def read_timestamp(r: Reader) -> Timestamp:
    return Timestamp(epoch=r.u64(), tick=r.u64(), node=r.u32())


def write_version(w: Writer, v: Version) -> None:
    w.u64(v.epoch)
    w.u32(v.index)


def read_version(r: Reader) -> Version:
    return Version(epoch=r.u64(), index=r.u32())


def write_read_entry(w: Writer, e: ReadEntry) -> None:
    w.bytes_(e.key)
    _write_option(w, e.version, write_version)


def read_read_entry(r: Reader) -> ReadEntry:
    return ReadEntry(key=r.bytes_(), version=_read_option(r, read_version))


def write_write_entry(w: Writer, e: WriteEntry) -> None:
    w.bytes_(e.key)
    _write_option(w, e.value, Writer.bytes_)


def read_write_entry(r: Reader) -> WriteEntry:
    return WriteEntry(key=r.bytes_(), value=_read_option(r, Reader.bytes_))


def write_payload(w: Writer, p: TxnPayload) -> None:
    write_txn_id(w, p.txn_id)
    w.u8(int(p.isolation))
    w.u8(int(p.consistency))
    w.u32(len(p.reads))
    for e in p.reads:
        write_read_entry(w, e)
    w.u32(len(p.writes))
    for we in p.writes:
        write_write_entry(w, we)
    w.u32(len(p.sub_txn_labels))
    for label in p.sub_txn_labels:
        w.bytes_(label.encode("utf-8"))


def read_payload(r: Reader) -> TxnPayload:
    txn_id = read_txn_id(r)
    isolation = IsolationLevel(r.u8())
    consistency = ConsistencyMode(r.u8())
    reads = tuple(read_read_entry(r) for _ in range(r.u32()))
    writes = tuple(read_write_entry(r) for _ in range(r.u32()))
    labels = tuple(r.bytes_().decode("utf-8") for _ in range(r.u32()))
    return TxnPayload(txn_id, isolation, consistency, reads, writes, labels)


def write_tagged_txn(w: Writer, t: TaggedTxn) -> None:
    write_payload(w, t.payload)
    write_timestamp(w, t.ts)


def read_tagged_txn(r: Reader) -> TaggedTxn:
    return TaggedTxn(payload=read_payload(r), ts=read_timestamp(r))


def write_verdict(w: Writer, v: TxnVerdict) -> None:
    write_txn_id(w, v.txn_id)
    w.u8(int(v.decision))
    w.u8(0 if v.reason is None else int(v.reason))
    _write_option(w, v.commit_version, write_version)


def read_verdict(r: Reader) -> TxnVerdict:
    txn_id = read_txn_id(r)
    decision = Decision(r.u8())
    reason_code = r.u8()
    reason = None if reason_code == 0 else AbortReason(reason_code)
    version = _read_option(r, read_version)
    return TxnVerdict(txn_id, decision, reason, version)


def _write_committed(w: Writer, c: CommittedTxn) -> None:
    write_txn_id(w, c.txn_id)
    write_timestamp(w, c.ts)
    w.u32(len(c.writes))
    for we in c.writes:
        write_write_entry(w, we)


def _read_committed(r: Reader) -> CommittedTxn:
    txn_id = read_txn_id(r)
    ts = read_timestamp(r)
    writes = tuple(read_write_entry(r) for _ in range(r.u32()))
    return CommittedTxn(txn_id, ts, writes)


def _epoch_log_body(epoch: EpochNumber, committed, aborted) -> bytes:
    w = Writer()
    w.u64(epoch)
    w.u32(len(committed))
    for c in committed:
        _write_committed(w, c)
    w.u32(len(aborted))
    for a in aborted:
        write_txn_id(w, a.txn_id)
        w.u8(int(a.reason))
    return w.getvalue()


def build_epoch_log(epoch: EpochNumber, committed, aborted) -> EpochLog:
    """Canonicalize (sort) the entry lists and stamp the content digest."""
    committed = tuple(sorted(committed, key=lambda c: c.ts))
    aborted = tuple(sorted(aborted, key=lambda a: a.txn_id))
    digest = hashlib.sha256(_epoch_log_body(epoch, committed, aborted)).digest()
    return EpochLog(epoch=epoch, committed=committed, aborted=aborted, digest=digest)


def encode_epoch_log(log: EpochLog) -> bytes:
    body = _epoch_log_body(log.epoch, log.committed, log.aborted)
    return body + log.digest


def decode_epoch_log(data: bytes, verify: bool = True) -> EpochLog:
    r = Reader(data)
    epoch = r.u64()
    committed = tuple(_read_committed(r) for _ in range(r.u32()))
    aborted = tuple(
        AbortedTxn(read_txn_id(r), AbortReason(r.u8())) for _ in range(r.u32())
    )
    digest = r.raw(DIGEST_SIZE)
    r.expect_done()
    log = EpochLog(epoch=epoch, committed=committed, aborted=aborted, digest=digest)
    if verify:
        expected = hashlib.sha256(
            _epoch_log_body(epoch, committed, aborted)
        ).digest()
        if digest != expected:
            raise DecodeError("epoch log digest mismatch")
    return log


def encode_payload(p: TxnPayload) -> bytes:
    w = Writer()
    write_payload(w, p)
    return w.getvalue()


def decode_payload(data: bytes) -> TxnPayload:
    r = Reader(data)
    p = read_payload(r)
    r.expect_done()
    return p


def encode_tagged_txn(t: TaggedTxn) -> bytes:
    w = Writer()
    write_tagged_txn(w, t)
    return w.getvalue()


def decode_tagged_txn(data: bytes) -> TaggedTxn:
    r = Reader(data)
    t = read_tagged_txn(r)
    r.expect_done()
    return t


def encode_verdict(v: TxnVerdict) -> bytes:
    w = Writer()
    write_verdict(w, v)
    return w.getvalue()


def decode_verdict(data: bytes) -> TxnVerdict:
    r = Reader(data)
    v = read_verdict(r)
    r.expect_done()
    return v


def chain_digest(prev: bytes, log_digest: bytes) -> bytes:
    """Running digest over a log sequence; seeds from b"" for epoch 0."""
    return hashlib.sha256(prev + log_digest).digest()
