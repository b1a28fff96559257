"""Command-line interface: argument plumbing and small end-to-end runs."""

import json

from taas.cli import main


def test_sim_writes_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = main(
        [
            "sim",
            "--taas-nodes",
            "2",
            "--workload",
            "ycsb",
            "--txns",
            "40",
            "--clients",
            "4",
            "--keys",
            "100",
            "--seed",
            "3",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "digests equal across nodes: True" in text
    doc = json.loads(out.read_text())
    assert doc["posted"] == 40
    assert doc["committed"] + sum(doc["aborted"].values()) + doc["lost"] == 40


def test_sim_with_fault_scenario_file(tmp_path, capsys):
    scenario = tmp_path / "faults.txt"
    scenario.write_text("40 kill 1\n90 restart 1\n")
    rc = main(
        [
            "sim",
            "--taas-nodes",
            "3",
            "--txns",
            "60",
            "--clients",
            "6",
            "--keys",
            "80",
            "--seed",
            "2",
            "--faults",
            str(scenario),
        ]
    )
    assert rc == 0
    assert "digests equal across nodes: True" in capsys.readouterr().out


def test_sweep_output_schema(tmp_path, capsys):
    out = tmp_path / "sweep.json"
    rc = main(
        [
            "sweep",
            "--max-taas",
            "2",
            "--txns",
            "40",
            "--clients",
            "8",
            "--keys",
            "200",
            "--seeds",
            "1,2",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == [
        "taas_nodes",
        "seed",
        "committed",
        "txn_per_sec",
        "p95_us",
    ]
    doc = json.loads(out.read_text())
    assert len(doc) == 4  # 2 sizes x 2 seeds
    for row in doc:
        assert {"taas_nodes", "seed", "committed", "txns_per_sec"} <= set(row)


def test_isolation_and_consistency_flags(capsys):
    rc = main(
        [
            "sim",
            "--taas-nodes",
            "1",
            "--txns",
            "10",
            "--clients",
            "2",
            "--keys",
            "50",
            "--isolation",
            "rc",
            "--consistency",
            "staleok",
        ]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "isolation=read_committed" in text
    assert "consistency=stale_ok" in text
