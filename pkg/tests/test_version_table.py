import random

import pytest

from taas import codec
from taas.model import (
    CommittedTxn,
    EpochGap,
    Timestamp,
    TxnId,
    Version,
    WriteEntry,
)
from taas.occ import VersionTable, apply_epoch_to_version_table


def make_log(epoch, writes_by_txn):
    committed = tuple(
        CommittedTxn(TxnId(0, epoch * 100 + i), Timestamp(epoch, i, 0), tuple(writes))
        for i, writes in enumerate(writes_by_txn)
    )
    return codec.build_epoch_log(epoch, committed, ())


def test_empty_log_advances_cursor_only():
    vt = VersionTable()
    digest_before = vt.digest()
    apply_epoch_to_version_table(vt, make_log(0, []))
    assert vt.applied_upto == 0
    assert vt.latest_version(b"K") is None
    assert vt.digest() != digest_before  # cursor is part of the digest


def test_commit_advances_version_monotonically():
    vt = VersionTable()
    vt.apply_log(make_log(0, [[WriteEntry(b"K", b"1")]]))
    v0 = vt.latest_version(b"K")
    vt.apply_log(make_log(1, []))
    assert vt.latest_version(b"K") == v0
    vt.apply_log(make_log(2, [[WriteEntry(b"K", b"2")]]))
    assert vt.latest_version(b"K") > v0


def test_versions_follow_commit_list_position():
    vt = VersionTable()
    vt.apply_log(
        make_log(0, [[WriteEntry(b"A", b"1")], [WriteEntry(b"B", b"2")]])
    )
    assert vt.latest_version(b"A") == Version(0, 0)
    assert vt.latest_version(b"B") == Version(0, 1)


def test_epoch_gap_rejected():
    vt = VersionTable()
    vt.apply_log(make_log(0, []))
    with pytest.raises(EpochGap):
        vt.apply_log(make_log(2, []))
    with pytest.raises(EpochGap):
        vt.apply_log(make_log(0, []))


def test_replay_determinism():
    rng = random.Random(5)
    logs = []
    for e in range(30):
        writes_by_txn = [
            [WriteEntry(b"k%d" % k, b"v%d" % rng.randint(0, 9))]
            for k in rng.sample(range(8), rng.randint(0, 3))
        ]
        logs.append(make_log(e, writes_by_txn))
    a, b = VersionTable(), VersionTable()
    for log in logs:
        a.apply_log(log)
    for log in logs:
        b.apply_log(log)
    assert a.digest() == b.digest()
    assert a.snapshot_state()[:2] == b.snapshot_state()[:2]


def test_window_and_verdicts_expire():
    vt = VersionTable(window_epochs=3)
    first = make_log(0, [[WriteEntry(b"K", b"1")]])
    vt.apply_log(first)
    first_txn = first.committed[0].txn_id
    assert vt.recent_verdict(first_txn) is not None
    for e in range(1, 5):
        vt.apply_log(make_log(e, []))
    assert vt.recent_verdict(first_txn) is None
    assert all(epoch > 1 for epoch, _ in vt._window)
    # latest version map is unaffected by window expiry
    assert vt.latest_version(b"K") == Version(0, 0)


def test_snapshot_round_trip():
    vt = VersionTable()
    for e in range(5):
        vt.apply_log(make_log(e, [[WriteEntry(b"k%d" % e, b"x")]]))
    other = VersionTable()
    other.restore_state(vt.snapshot_state())
    assert other.digest() == vt.digest()
    assert other.applied_upto == vt.applied_upto
