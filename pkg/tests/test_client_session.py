"""Session semantics: buffers, readset capture, composite assembly."""

import random

import pytest

from taas.client import CompositeTxn, RandomRouter, TxnIdAllocator, TxnSession
from taas.model import (
    ConsistencyMode,
    IsolationLevel,
    SENTINEL_UNREAD,
    TxnId,
    Version,
    VersionedRecord,
)

SI = IsolationLevel.SNAPSHOT_ISOLATION
RR = IsolationLevel.REPEATABLE_READ
RC = IsolationLevel.READ_COMMITTED


class FakeStore:
    def __init__(self, records=()):
        self.records = {r.key: r for r in records}
        self.fetches = []

    def get_data(self, key):
        self.fetches.append(key)
        return self.records.get(key)


def session(store, isolation=SI):
    return TxnSession(TxnId(9, 1), store, isolation, ConsistencyMode.STRONG)


def test_read_your_own_writes_without_storage_touch():
    store = FakeStore()
    s = session(store, isolation=RC)
    s.write(b"K", b"9")
    assert s.read(b"K") == b"9"
    assert store.fetches == []  # value came from the write buffer


def test_read_records_observed_version():
    store = FakeStore([VersionedRecord(b"K", b"v", Version(4, 1))])
    s = session(store)
    assert s.read(b"K") == b"v"
    p = s.build_payload()
    assert [(r.key, r.version) for r in p.reads] == [(b"K", Version(4, 1))]


def test_absent_key_records_sentinel():
    store = FakeStore()
    s = session(store)
    assert s.read(b"nope") is None
    p = s.build_payload()
    assert p.reads[0].version is SENTINEL_UNREAD


def test_last_write_wins_locally():
    s = session(FakeStore(), isolation=RC)
    s.write(b"K", b"1")
    s.write(b"K", b"2")
    p = s.build_payload()
    assert [(w.key, w.value) for w in p.writes] == [(b"K", b"2")]


def test_delete_then_read_is_absent_locally():
    store = FakeStore([VersionedRecord(b"K", b"v", Version(0, 0))])
    s = session(store)
    s.delete(b"K")
    assert s.read(b"K") is None
    p = s.build_payload()
    assert p.writes[0].value is None


def test_si_blind_write_is_added_to_readset():
    store = FakeStore([VersionedRecord(b"K", b"v", Version(2, 0))])
    s = session(store, isolation=SI)
    s.write(b"K", b"new")
    p = s.build_payload()
    assert [(r.key, r.version) for r in p.reads] == [(b"K", Version(2, 0))]


def test_rr_blind_write_not_added_to_readset():
    store = FakeStore([VersionedRecord(b"K", b"v", Version(2, 0))])
    s = session(store, isolation=RR)
    s.write(b"K", b"new")
    p = s.build_payload()
    assert p.reads == ()


def test_session_immutable_after_post():
    s = session(FakeStore())
    s.write(b"K", b"1")
    s.build_payload()
    with pytest.raises(RuntimeError):
        s.read(b"K")
    with pytest.raises(RuntimeError):
        s.write(b"K", b"2")


def test_payload_faithful_to_buffers():
    store = FakeStore(
        [
            VersionedRecord(b"a", b"1", Version(1, 0)),
            VersionedRecord(b"b", b"2", Version(1, 1)),
        ]
    )
    s = session(store)
    s.read(b"a")
    s.read(b"b")
    s.read(b"a")  # repeated read: one entry
    s.write(b"c", b"3")
    p = s.build_payload()
    assert {r.key for r in p.reads} == {b"a", b"b", b"c"}
    assert [(w.key, w.value) for w in p.writes] == [(b"c", b"3")]


def test_distinct_txn_ids():
    alloc = TxnIdAllocator(origin=5)
    a, b = alloc.allocate(), alloc.allocate()
    assert a != b and a.origin == b.origin == 5


def test_composite_merges_subs_into_one_payload():
    store = FakeStore(
        [
            VersionedRecord(b"kv:x", b"1", Version(3, 0)),
            VersionedRecord(b"row:y", b"2", Version(3, 1)),
        ]
    )
    c = CompositeTxn(
        txn_id=TxnId(7, 1),
        isolation=SI,
        consistency=ConsistencyMode.STRONG,
        source=store,
    )
    kv = c.sub("kv")
    row = c.sub("row")
    kv.read(b"kv:x")
    kv.write(b"kv:x", b"10")
    row.read(b"row:y")
    row.write(b"row:z", b"20")
    p = c.build_payload()
    assert p.txn_id == TxnId(7, 1)
    assert p.sub_txn_labels == ("kv", "row")
    assert {w.key for w in p.writes} == {b"kv:x", b"row:z"}
    assert {r.key for r in p.reads} >= {b"kv:x", b"row:y"}


def test_composite_keeps_oldest_read_version_on_overlap():
    c = CompositeTxn(
        txn_id=TxnId(7, 2),
        isolation=SI,
        consistency=ConsistencyMode.STRONG,
        source=FakeStore(),
    )
    a = c.sub("kv")
    b = c.sub("row")
    a.read_buffer[b"k"] = (b"x", Version(5, 0))
    b.read_buffer[b"k"] = (b"x", Version(3, 0))
    p = c.build_payload()
    assert p.reads[0].version == Version(3, 0)


def test_router_uniform_and_excludes():
    router = RandomRouter((0, 1, 2), random.Random(1))
    picks = {router.pick() for _ in range(100)}
    assert picks == {0, 1, 2}
    assert all(router.pick(exclude=1) != 1 for _ in range(50))
    single = RandomRouter((4,), random.Random(1))
    assert single.pick(exclude=4) == 4  # nothing else to choose
