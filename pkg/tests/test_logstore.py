"""Durable log segments, digest chains, snapshots, sealed batches."""

import os

from taas import codec, wire
from taas.logstore import LogStore
from taas.model import CommittedTxn, Timestamp, TxnId, WriteEntry
from taas.occ import VersionTable
from tests.util import payload, tagged


def make_log(epoch, n_writes=1):
    committed = tuple(
        CommittedTxn(
            TxnId(0, epoch * 100 + i),
            Timestamp(epoch, i, 0),
            (WriteEntry(b"k%d" % i, b"e%d" % epoch),),
        )
        for i in range(n_writes)
    )
    return codec.build_epoch_log(epoch, committed, ())


def fill(store: LogStore, n: int):
    for e in range(store.next_epoch(), n):
        store.append(make_log(e))


def test_memory_mode_chain_and_access():
    store = LogStore()
    fill(store, 5)
    assert store.last_epoch == 4
    assert store.get(3).log.epoch == 3
    assert store.get(9) is None
    chain = b""
    for e in range(5):
        chain = codec.chain_digest(chain, store.get(e).log.digest)
    assert store.chain() == chain


def test_append_rejects_gaps():
    store = LogStore()
    fill(store, 2)
    import pytest

    with pytest.raises(ValueError):
        store.append(make_log(5))


def test_durable_reload_round_trip(tmp_path):
    path = str(tmp_path / "node0")
    store = LogStore(data_dir=path, segment_epochs=4)
    fill(store, 10)
    chain = store.chain()
    store.close()
    # several segment files were produced
    segs = [f for f in os.listdir(path) if f.startswith("seg-")]
    assert len(segs) >= 3
    reloaded = LogStore(data_dir=path, segment_epochs=4)
    assert reloaded.last_epoch == 9
    assert reloaded.chain() == chain
    assert reloaded.get(7).log == store.get(7).log


def test_torn_tail_is_truncated(tmp_path):
    path = str(tmp_path / "node0")
    store = LogStore(data_dir=path, segment_epochs=100)
    fill(store, 6)
    store.close()
    seg = os.path.join(path, "seg-0.log")
    data = open(seg, "rb").read()
    with open(seg, "wb") as fh:
        fh.write(data[:-7])  # crash mid-write of the last entry
    reloaded = LogStore(data_dir=path, segment_epochs=100)
    assert reloaded.last_epoch == 4
    # appending over the truncated tail continues the chain correctly
    reloaded.append(make_log(5))
    assert reloaded.last_epoch == 5


def test_records_persist_with_logs(tmp_path):
    path = str(tmp_path / "node0")
    store = LogStore(data_dir=path)
    log = make_log(0)
    from taas.occ import records_from_log

    records = records_from_log(log)
    store.append(log, records)
    store.close()
    reloaded = LogStore(data_dir=path)
    assert reloaded.get(0).records == records


def test_snapshot_written_at_interval_and_used_on_reload(tmp_path):
    path = str(tmp_path / "node0")
    store = LogStore(data_dir=path, segment_epochs=4, snapshot_every=4)
    vt = VersionTable()
    for e in range(8):
        log = make_log(e)
        store.append(log)
        vt.apply_log(log)
        store.maybe_snapshot(lambda: wire.encode_vt_state(vt.snapshot_state()))
    store.close()
    snaps = [f for f in os.listdir(path) if f.startswith("snap-")]
    assert snaps  # snapshots at epochs 3 and 7
    reloaded = LogStore(data_dir=path, segment_epochs=4, snapshot_every=4)
    assert reloaded.base_state is not None
    assert reloaded.base_epoch == 8  # latest snapshot at epoch 7
    restored = VersionTable()
    restored.restore_state(wire.decode_vt_state(reloaded.base_state))
    assert restored.digest() == vt.digest()


def test_sealed_batches_survive_reload_and_drop(tmp_path):
    path = str(tmp_path / "node0")
    store = LogStore(data_dir=path)
    txns = (tagged(payload(0, 1, writes=[(b"a", b"1")]), 3, 1, 0),)
    store.save_sealed(3, txns)
    store.close()
    reloaded = LogStore(data_dir=path)
    assert reloaded.sealed_batches() == {3: txns}
    reloaded.drop_sealed_upto(3)
    assert reloaded.sealed_batches() == {}
    again = LogStore(data_dir=path)
    assert again.sealed_batches() == {}


def test_install_base_then_tail(tmp_path):
    vt = VersionTable()
    logs = [make_log(e) for e in range(6)]
    for log in logs[:4]:
        vt.apply_log(log)
    state = wire.encode_vt_state(vt.snapshot_state())
    store = LogStore(data_dir=str(tmp_path / "n"))
    store.install_base(state, applied_epoch=3)
    assert store.next_epoch() == 4
    store.append(logs[4])
    store.append(logs[5])
    assert store.entries_from(0)[0].log.epoch == 4
    assert store.get(2) is None
