"""Workload generators: determinism, shapes, distributions."""

import random
from collections import Counter

import pytest

from taas import workload as wl


def test_spec_kind_read_percentages():
    assert wl.make_spec("ycsb", 10, 1, 0).read_pct == 95
    assert wl.make_spec("ycsb-hc", 10, 1, 0).read_pct == 50
    assert wl.make_spec("ycsb-ro", 10, 1, 0).read_pct == 100
    with pytest.raises(ValueError):
        wl.make_spec("nope", 10, 1, 0)
    with pytest.raises(ValueError):
        wl.WorkloadSpec(kind="ycsb", txn_count=1, clients=1, seed=0, read_pct=140)


def test_stream_fully_determined_by_seed_and_client():
    spec = wl.make_spec("ycsb", txn_count=40, clients=4, seed=9, keys=100)
    a = list(wl.program_stream(spec, 2))
    b = list(wl.program_stream(spec, 2))
    assert a == b
    c = list(wl.program_stream(spec, 3))
    assert a != c


def test_txn_split_across_clients():
    spec = wl.make_spec("ycsb", txn_count=10, clients=3, seed=0)
    counts = [wl.txns_for_client(spec, i) for i in range(3)]
    assert sum(counts) == 10 and max(counts) - min(counts) <= 1


def test_ycsb_programs_have_ten_ops_and_mix():
    spec = wl.make_spec("ycsb-hc", txn_count=50, clients=1, seed=5, keys=500)
    reads = writes = 0
    for program in wl.program_stream(spec, 0):
        assert len(program.ops) == 10
        reads += sum(1 for op in program.ops if op[0] == "r")
        writes += sum(1 for op in program.ops if op[0] == "w")
    assert reads + writes == 500
    assert 0.35 < reads / 500 < 0.65  # 50/50 mix


def test_zipf_skews_toward_low_ranks():
    gen = wl.ZipfGenerator(1000, 0.99)
    rng = random.Random(7)
    counts = Counter(gen.sample(rng) for _ in range(20_000))
    top10 = sum(counts[i] for i in range(10))
    assert top10 / 20_000 > 0.25  # heavy head
    assert counts.most_common(1)[0][0] == 0
    uniform = wl.ZipfGenerator(1000, 0.0)
    ucounts = Counter(uniform.sample(rng) for _ in range(20_000))
    assert max(ucounts.values()) / 20_000 < 0.01


def test_composite_shape_matches_mix():
    spec = wl.make_spec(
        "composite", txn_count=20, clients=1, seed=2, keys=50, read_pct=50
    )
    for program in wl.program_stream(spec, 0):
        assert program.labels == ("kv", "row", "graph")
        assert len(program.ops) == 9  # 4 kv + 4 row + 1 graph
        by_label = Counter(op[0] for op in program.ops)
        assert by_label == {"kv": 4, "row": 4, "graph": 1}
        for op in program.ops:
            assert op[2].startswith(op[0].encode() + b":")


def test_transfer_programs_touch_two_accounts():
    spec = wl.make_spec("transfer", txn_count=50, clients=1, seed=4, accounts=20)
    kinds = Counter()
    for program in wl.program_stream(spec, 0):
        (op,) = program.ops
        assert op[0] == "transfer"
        kinds["reserve" if op[1] == wl.RESERVE_KEY else "peer"] += 1
        assert op[1] != op[2]
    assert kinds["reserve"] > 0 and kinds["peer"] > 0


def test_seed_programs_cover_keyspace():
    spec = wl.make_spec("transfer", txn_count=1, clients=1, seed=0, accounts=10)
    keys = {op[1] for p in wl.seed_programs(spec) for op in p.ops}
    assert keys == {wl.account_key(i) for i in range(10)} | {wl.RESERVE_KEY}
    spec2 = wl.make_spec("ycsb", txn_count=1, clients=1, seed=0, keys=450)
    programs = list(wl.seed_programs(spec2, batch=200))
    assert [len(p.ops) for p in programs] == [200, 200, 50]


def test_balance_codec():
    for v in (0, 7, -3, 10**12):
        assert wl.decode_balance(wl.encode_balance(v)) == v
    assert wl.decode_balance(None) == 0
