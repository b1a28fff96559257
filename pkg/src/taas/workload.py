"""Workload generation: key-value mixes, transfer/deposit, composite shapes.

Every stream is fully determined by (spec, client index): each client draws
from its own seeded generator, so runs are reproducible operation-for-
operation regardless of scheduling.
"""

import bisect
import random
from dataclasses import dataclass, field, replace

from .model import ConsistencyMode, IsolationLevel

VALUE_SIZE = 16
INITIAL_BALANCE = 1_000
RESERVE_KEY = b"acct:reserve"
RESERVE_BALANCE = 1_000_000


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str  # ycsb | ycsb-hc | ycsb-ro | transfer | composite
    txn_count: int
    clients: int
    seed: int
    keys: int = 10_000
    ops_per_txn: int = 10
    read_pct: int = 95
    zipf_theta: float = 0.99
    accounts: int = 1_000
    kv_ops: int = 4
    row_ops: int = 4
    graph_ops: int = 1
    isolation: IsolationLevel = IsolationLevel.SNAPSHOT_ISOLATION
    consistency: ConsistencyMode = ConsistencyMode.STRONG

    def __post_init__(self):
        if not 0 <= self.read_pct <= 100:
            raise ValueError("read_pct must be a percentage")
        if self.clients <= 0 or self.txn_count < 0:
            raise ValueError("need at least one client and a txn count")


KIND_READ_PCT = {"ycsb": 95, "ycsb-hc": 50, "ycsb-ro": 100}


def make_spec(kind: str, txn_count: int, clients: int, seed: int, **overrides) -> WorkloadSpec:
    if kind in KIND_READ_PCT:
        overrides.setdefault("read_pct", KIND_READ_PCT[kind])
    elif kind not in ("transfer", "composite"):
        raise ValueError(f"unknown workload kind {kind!r}")
    return WorkloadSpec(kind=kind, txn_count=txn_count, clients=clients, seed=seed, **overrides)


class ZipfGenerator:
    """Bounded Zipfian sampler: P(rank i) proportional to 1 / i**theta."""

    def __init__(self, n: int, theta: float):
        self.n = n
        if theta <= 0:
            self._cum = None  # uniform
            return
        cum = []
        total = 0.0
        for i in range(1, n + 1):
            total += 1.0 / (i**theta)
            cum.append(total)
        self._cum = cum
        self._total = total

    def sample(self, rng: random.Random) -> int:
        if self._cum is None:
            return rng.randrange(self.n)
        x = rng.random() * self._total
        return bisect.bisect_left(self._cum, x)


def kv_key(i: int) -> bytes:
    return b"user%08d" % i


def account_key(i: int) -> bytes:
    return b"acct%06d" % i


def encode_balance(v: int) -> bytes:
    return v.to_bytes(8, "big", signed=True)


def decode_balance(b: bytes | None) -> int:
    return 0 if b is None else int.from_bytes(b, "big", signed=True)


# Programs are small op lists interpreted against a session:
#   ("r", key)                      read
#   ("w", key, value)               write
#   ("transfer", src, dst, amount)  read both, move amount
#   ("deposit", acct, amount)       read-modify-write increment


@dataclass(frozen=True)
class TxnProgram:
    ops: tuple
    labels: tuple[str, ...] = ()


def txns_for_client(spec: WorkloadSpec, client_idx: int) -> int:
    base, extra = divmod(spec.txn_count, spec.clients)
    return base + (1 if client_idx < extra else 0)


def program_stream(spec: WorkloadSpec, client_idx: int):
    """Deterministic per-client iterator of transaction programs."""
    rng = random.Random(f"{spec.seed}/client/{client_idx}")
    count = txns_for_client(spec, client_idx)
    if spec.kind in KIND_READ_PCT or spec.kind == "ycsb":
        zipf = ZipfGenerator(spec.keys, spec.zipf_theta)
        for i in range(count):
            yield _ycsb_program(spec, rng, zipf, client_idx, i)
    elif spec.kind == "transfer":
        for i in range(count):
            yield _transfer_program(spec, rng)
    elif spec.kind == "composite":
        zipf = ZipfGenerator(spec.keys, spec.zipf_theta)
        for i in range(count):
            yield _composite_program(spec, rng, zipf, client_idx, i)
    else:  # pragma: no cover - guarded by make_spec
        raise ValueError(spec.kind)


def _ycsb_program(spec, rng, zipf, client_idx, txn_idx) -> TxnProgram:
    ops = []
    for op_idx in range(spec.ops_per_txn):
        k = kv_key(zipf.sample(rng))
        if rng.randrange(100) < spec.read_pct:
            ops.append(("r", k))
        else:
            value = b"c%04x-%06x-%02x" % (client_idx, txn_idx, op_idx)
            ops.append(("w", k, value.ljust(VALUE_SIZE, b".")))
    return TxnProgram(ops=tuple(ops))


def _transfer_program(spec, rng) -> TxnProgram:
    # deposits draw from a shared reserve so the total balance is invariant
    a = rng.randrange(spec.accounts)
    amount = rng.randint(1, 100)
    if rng.random() < 0.8:
        b = rng.randrange(spec.accounts)
        while b == a:
            b = rng.randrange(spec.accounts)
        return TxnProgram(ops=(("transfer", account_key(a), account_key(b), amount),))
    return TxnProgram(ops=(("transfer", RESERVE_KEY, account_key(a), amount),))


def _composite_program(spec, rng, zipf, client_idx, txn_idx) -> TxnProgram:
    """Sub-transactions over distinct model keyspaces, one shared txn id."""
    ops = []
    labels = []
    shapes = (("kv", spec.kv_ops), ("row", spec.row_ops), ("graph", spec.graph_ops))
    for label, n_ops in shapes:
        if n_ops <= 0:
            continue
        labels.append(label)
        prefix = label.encode() + b":"
        for op_idx in range(n_ops):
            k = prefix + kv_key(zipf.sample(rng))
            if rng.randrange(100) < spec.read_pct:
                ops.append((label, "r", k))
            else:
                value = b"%s-%04x-%06x" % (label.encode(), client_idx, txn_idx)
                ops.append((label, "w", k, value[:VALUE_SIZE]))
    return TxnProgram(ops=tuple(ops), labels=tuple(labels))


def execute_program(program: TxnProgram, session) -> None:
    """Run a program's operations against one session (or composite subs)."""
    for op in program.ops:
        if op[0] == "r":
            session.read(op[1])
        elif op[0] == "w":
            session.write(op[1], op[2])
        elif op[0] == "transfer":
            _, src, dst, amount = op
            from_balance = decode_balance(session.read(src))
            to_balance = decode_balance(session.read(dst))
            session.write(src, encode_balance(from_balance - amount))
            session.write(dst, encode_balance(to_balance + amount))
        elif op[0] == "deposit":
            _, acct, amount = op
            balance = decode_balance(session.read(acct))
            session.write(acct, encode_balance(balance + amount))
        else:
            raise ValueError(f"unknown op {op!r}")


def execute_composite_program(program: TxnProgram, composite) -> None:
    sessions = {label: composite.sub(label) for label in program.labels}
    for op in program.ops:
        label, rest = op[0], op[1:]
        session = sessions[label]
        if rest[0] == "r":
            session.read(rest[1])
        else:
            session.write(rest[1], rest[2])


def op_count(program: TxnProgram) -> int:
    counts = {"r": 1, "w": 1, "transfer": 4, "deposit": 2}
    total = 0
    for op in program.ops:
        if op[0] in ("r", "w"):
            total += 1
        elif op[0] in counts:
            total += counts[op[0]]
        else:  # composite sub-op
            total += 1
    return total


def seed_programs(spec: WorkloadSpec, batch: int = 200):
    """Initial-load programs that populate the workload's keyspace."""
    writes = []
    if spec.kind == "transfer":
        writes = [
            ("w", account_key(i), encode_balance(INITIAL_BALANCE))
            for i in range(spec.accounts)
        ]
        writes.append(("w", RESERVE_KEY, encode_balance(RESERVE_BALANCE)))
    elif spec.kind == "composite":
        for label in ("kv", "row", "graph"):
            prefix = label.encode() + b":"
            writes.extend(
                ("w", prefix + kv_key(i), b"seed".ljust(VALUE_SIZE, b"."))
                for i in range(spec.keys)
            )
    else:
        writes = [
            ("w", kv_key(i), b"seed".ljust(VALUE_SIZE, b"."))
            for i in range(spec.keys)
        ]
    for start in range(0, len(writes), batch):
        yield TxnProgram(ops=tuple(writes[start : start + batch]))
