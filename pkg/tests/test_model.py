import random

import pytest

from taas.model import (
    AbortReason,
    Decision,
    Timestamp,
    TxnId,
    TxnVerdict,
    Version,
    compare_timestamps,
    version_before,
)


@pytest.mark.parametrize(
    "a,b,expected",
    [
        ((1, 2, 0), (1, 3, 1), -1),  # tick dominates within equal epoch
        ((2, 0, 5), (1, 99, 0), 1),  # epoch dominates
        ((1, 3, 0), (1, 3, 1), -1),  # node breaks the tie
    ],
)
def test_timestamp_order_examples(a, b, expected):
    assert compare_timestamps(Timestamp(*a), Timestamp(*b)) == expected
    assert compare_timestamps(Timestamp(*b), Timestamp(*a)) == -expected
    assert compare_timestamps(Timestamp(*a), Timestamp(*a)) == 0


def test_timestamp_total_order_random():
    rng = random.Random(11)
    stamps = [
        Timestamp(rng.randint(0, 3), rng.randint(0, 5), rng.randint(0, 3))
        for _ in range(200)
    ]
    ordered = sorted(stamps)
    for x, y in zip(ordered, ordered[1:]):
        assert compare_timestamps(x, y) <= 0
    # antisymmetry + transitivity spot checks
    for _ in range(500):
        x, y, z = rng.choice(stamps), rng.choice(stamps), rng.choice(stamps)
        assert compare_timestamps(x, y) == -compare_timestamps(y, x)
        if x <= y <= z:
            assert x <= z


def test_distinct_node_timestamps_never_equal():
    a = Timestamp(5, 7, 0)
    b = Timestamp(5, 7, 1)
    assert compare_timestamps(a, b) != 0


def test_version_ordering_and_sentinel():
    assert Version(1, 2) < Version(2, 0)
    assert Version(3, 1) < Version(3, 2)
    assert version_before(None, Version(0, 0))
    assert not version_before(None, None)
    assert not version_before(Version(2, 0), Version(1, 5))
    assert not version_before(Version(1, 1), Version(1, 1))


def test_verdict_invariant():
    t = TxnId(0, 1)
    ok = TxnVerdict.committed(t, Version(3, 0))
    assert ok.decision == Decision.COMMITTED and ok.reason is None
    bad = TxnVerdict.aborted(t, AbortReason.STALE_READ)
    assert bad.commit_version is None
    with pytest.raises(ValueError):
        TxnVerdict(t, Decision.COMMITTED, None, None)
    with pytest.raises(ValueError):
        TxnVerdict(t, Decision.ABORTED, None, None)


def test_payload_rejects_duplicate_keys():
    from tests.util import payload

    with pytest.raises(ValueError):
        payload(0, 1, writes=[(b"a", b"1"), (b"a", b"2")])
    with pytest.raises(ValueError):
        payload(0, 1, reads=[(b"a", None), (b"a", Version(0, 0))])
