"""Socket runtime: live clusters, frame transport, real server processes."""

import json
import socket
import subprocess
import sys
import threading
import time

import pytest

from taas import workload as wl
from taas.bench import run_live
from taas.exchange import ClusterConfig
from taas.model import ConsistencyMode, Decision, IsolationLevel
from taas.net import (
    LiveClient,
    LiveCluster,
    free_ports,
    local_config,
    recv_frame,
    send_frame,
)
from taas.wire import BatchMessage, chunk_batch
from tests.util import payload, tagged


def test_three_chunk_batch_over_loopback_socket():
    txns = tuple(
        tagged(payload(0, i, writes=[(b"k%02d" % i, b"x" * 64)]), 2, i + 1, 0)
        for i in range(12)
    )
    chunks = chunk_batch(0, 2, txns, limit=300)
    assert len(chunks) >= 3
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]
    received = []

    def echo_side():
        conn, _ = server.accept()
        while True:
            msg = recv_frame(conn)
            if msg is None:
                return
            received.append(msg)
            send_frame(conn, msg)

    t = threading.Thread(target=echo_side, daemon=True)
    t.start()
    client = socket.create_connection(("127.0.0.1", port))
    echoed = []
    for chunk in chunks:
        send_frame(client, chunk)
        echoed.append(recv_frame(client))
    client.close()
    server.close()
    assert echoed == list(chunks)
    reassembled = tuple(t for c in echoed for t in c.txns)
    assert reassembled == txns


def test_single_node_tiny_workload_completes():
    cfg = local_config(1, 1, epoch_us=10_000)
    spec = wl.make_spec(
        "ycsb", txn_count=20, clients=2, seed=1, keys=60, ops_per_txn=4
    )
    report = run_live(cfg, spec)
    assert report.mode == "live"
    assert report.posted == 20 and report.lost == 0
    assert report.digests_equal


def test_three_node_transfer_conserves_balance():
    cfg = local_config(3, 1, epoch_us=10_000)
    spec = wl.make_spec(
        "transfer", txn_count=60, clients=6, seed=2, accounts=30
    )
    cluster = LiveCluster(cfg)
    cluster.start()
    try:
        time.sleep(0.3)
        report = run_live(cfg, spec, cluster=cluster)
        assert report.digests_equal
        adaptor = cluster.storage_servers[0].adaptor
        total = sum(
            wl.decode_balance(rec.value)
            for key, rec in adaptor._data.items()
            if key.startswith(b"acct")
        )
        assert total == 30 * wl.INITIAL_BALANCE + wl.RESERVE_BALANCE
    finally:
        cluster.stop()


def test_kill_and_restart_node_mid_run():
    cfg = local_config(3, 1, epoch_us=10_000)
    spec = wl.make_spec(
        "ycsb", txn_count=120, clients=6, seed=4, keys=100, ops_per_txn=4
    )
    cluster = LiveCluster(cfg)
    cluster.start()
    try:
        time.sleep(0.3)

        def chaos():
            time.sleep(0.6)
            cluster.kill_node(1)
            time.sleep(0.5)
            cluster.restart_node(1)

        t = threading.Thread(target=chaos, daemon=True)
        t.start()
        report = run_live(cfg, spec, cluster=cluster)
        t.join()
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            digests = {
                server.node.chain_digest()
                for server in cluster.node_servers.values()
            }
            applied = {
                server.node.applied_upto
                for server in cluster.node_servers.values()
            }
            if len(digests) == 1 and len(applied) == 1:
                break
            time.sleep(0.05)
        assert len({
            server.node.chain_digest() for server in cluster.node_servers.values()
        }) == 1
        assert report.posted == 120
    finally:
        cluster.stop()


def test_real_server_processes_serve_a_transaction(tmp_path):
    n_taas, n_storage = 2, 1
    ports = free_ports(n_taas + n_storage)
    cfg = ClusterConfig(
        taas_ids=tuple(range(n_taas)),
        storage_ids=(0,),
        taas_addresses={i: ("127.0.0.1", ports[i]) for i in range(n_taas)},
        storage_addresses={0: ("127.0.0.1", ports[n_taas])},
        epoch_origin_us=time.time_ns() // 1000,
    )
    config_path = tmp_path / "cluster.json"
    config_path.write_text(cfg.to_json())
    procs = []
    try:
        procs.append(
            subprocess.Popen(
                [
                    sys.executable,
                    "-m",
                    "taas.cli",
                    "storage",
                    "--storage-id",
                    "0",
                    "--config",
                    str(config_path),
                ],
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
            )
        )
        for i in range(n_taas):
            procs.append(
                subprocess.Popen(
                    [
                        sys.executable,
                        "-m",
                        "taas.cli",
                        "node",
                        "--node-id",
                        str(i),
                        "--config",
                        str(config_path),
                    ],
                    stdout=subprocess.PIPE,
                    stderr=subprocess.STDOUT,
                )
            )
        time.sleep(1.0)
        client = LiveClient(cfg, origin=40_000)
        s = client.session(IsolationLevel.READ_COMMITTED, ConsistencyMode.STALE_OK)
        s.write(b"hello", b"world")
        verdict = client.commit(s)
        assert verdict.decision == Decision.COMMITTED
        deadline = time.monotonic() + 10
        rec = None
        while time.monotonic() < deadline and rec is None:
            rec = client.get_data(b"hello")
            time.sleep(0.05)
        assert rec is not None and rec.value == b"world"
        client.close()
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
