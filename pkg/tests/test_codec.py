import random

import pytest

from taas import codec
from taas.model import (
    AbortedTxn,
    AbortReason,
    CommittedTxn,
    ConsistencyMode,
    IsolationLevel,
    Timestamp,
    TxnId,
    TxnVerdict,
    Version,
    WriteEntry,
)
from tests.util import payload, tagged


def test_empty_log_is_fixed_and_round_trips():
    log = codec.build_epoch_log(0, (), ())
    data = codec.encode_epoch_log(log)
    # u64 epoch + two empty list counts + 32-byte digest
    assert len(data) == 8 + 4 + 4 + 32
    assert data[:16] == b"\x00" * 16
    decoded = codec.decode_epoch_log(data)
    assert decoded == log
    # same content always yields the same digest
    assert codec.build_epoch_log(0, (), ()).digest == log.digest


def _random_log(rng: random.Random):
    epoch = rng.randint(0, 50)
    committed = []
    for i in range(rng.randint(0, 10)):
        writes = tuple(
            WriteEntry(b"k%d" % k, None if rng.random() < 0.2 else b"v%d" % k)
            for k in rng.sample(range(20), rng.randint(0, 4))
        )
        committed.append(
            CommittedTxn(
                TxnId(rng.randint(0, 3), i),
                Timestamp(epoch, i, rng.randint(0, 3)),
                writes,
            )
        )
    aborted = [
        AbortedTxn(TxnId(rng.randint(0, 3), 100 + i), AbortReason(rng.randint(1, 5)))
        for i in range(rng.randint(0, 6))
    ]
    return epoch, committed, aborted


def test_epoch_log_round_trip_random():
    rng = random.Random(7)
    for _ in range(200):
        epoch, committed, aborted = _random_log(rng)
        log = codec.build_epoch_log(epoch, committed, aborted)
        assert codec.decode_epoch_log(codec.encode_epoch_log(log)) == log


def test_canonicalization_ignores_construction_order():
    rng = random.Random(13)
    for _ in range(50):
        epoch, committed, aborted = _random_log(rng)
        a = codec.build_epoch_log(epoch, committed, aborted)
        shuffled_c = committed[:]
        shuffled_a = aborted[:]
        rng.shuffle(shuffled_c)
        rng.shuffle(shuffled_a)
        b = codec.build_epoch_log(epoch, shuffled_c, shuffled_a)
        assert codec.encode_epoch_log(a) == codec.encode_epoch_log(b)
        assert a.digest == b.digest


def test_digest_tamper_detected():
    log = codec.build_epoch_log(3, (), ())
    data = bytearray(codec.encode_epoch_log(log))
    data[-1] ^= 0xFF
    with pytest.raises(codec.DecodeError):
        codec.decode_epoch_log(bytes(data))


def test_payload_round_trip():
    rng = random.Random(3)
    for i in range(100):
        reads = [
            (b"r%d" % k, None if rng.random() < 0.3 else Version(rng.randint(0, 9), k))
            for k in rng.sample(range(30), rng.randint(0, 5))
        ]
        writes = [
            (b"w%d" % k, None if rng.random() < 0.3 else bytes([k]) * rng.randint(0, 9))
            for k in rng.sample(range(30), rng.randint(0, 5))
        ]
        p = payload(
            rng.randint(0, 9),
            i,
            writes=writes,
            reads=reads,
            isolation=IsolationLevel(rng.randint(0, 3)),
            consistency=ConsistencyMode(rng.randint(0, 1)),
            labels=["kv", "row"] if rng.random() < 0.3 else [],
        )
        assert codec.decode_payload(codec.encode_payload(p)) == p
        t = tagged(p, rng.randint(0, 9), i, rng.randint(0, 3))
        assert codec.decode_tagged_txn(codec.encode_tagged_txn(t)) == t


def test_verdict_round_trip():
    t = TxnId(2, 9)
    for v in (
        TxnVerdict.committed(t, Version(4, 1)),
        TxnVerdict.aborted(t, AbortReason.WRITE_CONFLICT_LOST),
        TxnVerdict.aborted(t, AbortReason.NODE_SHUTDOWN),
    ):
        assert codec.decode_verdict(codec.encode_verdict(v)) == v
