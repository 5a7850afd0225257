from __future__ import annotations

import csv
import io
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from divprem.cli import main
from divprem.tree import dump_tree, random_tree


@pytest.fixture
def coin_file(tmp_path, coin):
    path = tmp_path / "t.json"
    dump_tree(path, coin, {"Z": np.array([1.0, 0.0])})
    return str(path)


@pytest.fixture
def policy_file(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"T": 1, "schedule": {"alpha": 1}, "contracts": [{"id": "c", "payments": [1.0], "hazard": [0.1]}]}))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_premium_two_point(capsys, coin_file):
    code, out, _ = run(capsys, "premium", "--tree", coin_file, "--rv", "Z")
    assert code == 0
    report = json.loads(out)
    assert report["premium"] == 0.620114506958
    assert report["H"]["1"] == {"a": 1.0, "b": 0.0}


def test_premium_csv(capsys, coin_file):
    code, out, _ = run(capsys, "premium", "--tree", coin_file, "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["time", "node", "H"]
    assert rows[1] == ["0", "r", "0.620114506958"]


def test_missing_rv_names_it(capsys, coin_file):
    code, out, err = run(capsys, "premium", "--tree", coin_file, "--rv", "Y")
    assert code == 1
    assert "'Y'" in err and out == ""


def test_parse_error_has_location(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"horizon": 1,\n  "nodes": [,]}')
    code, _, err = run(capsys, "premium", "--tree", str(bad))
    assert code == 1
    assert f"{bad}:2:" in err


def test_invalid_tree_reports_node(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"horizon": 1, "nodes": [
        {"id": "r", "time": 0, "parent": None, "prob": 1.0},
        {"id": "a", "time": 1, "parent": "r", "prob": 0.6},
        {"id": "b", "time": 1, "parent": "r", "prob": 0.5}]}))
    code, _, err = run(capsys, "premium", "--tree", str(bad))
    assert code == 1
    assert "probability sum 1.1" in err and "'r'" in err


def test_missing_file(capsys):
    code, _, err = run(capsys, "premium", "--tree", "no/such/file.json")
    assert code == 1 and "not found" in err


def test_insure(capsys, policy_file):
    code, out, _ = run(capsys, "insure", "--portfolio", policy_file)
    assert code == 0
    report = json.loads(out)
    assert report["premium"] == 0.15856507874
    assert report["h"]["c"] == [1.17182818285, 1.0]


def test_allocate_and_strict(capsys, coin_file, tmp_path):
    code, out, _ = run(capsys, "allocate", "--tree", coin_file, "--strict")
    assert code == 0
    report = json.loads(out)
    assert report["diagnostics"]["martingale_residual"] <= 1e-9
    rng = np.random.default_rng(1)
    tree = random_tree(rng, 3)
    big = tmp_path / "big.json"
    dump_tree(big, tree, {"Z": np.random.default_rng(2).uniform(-40, 40, tree.size(3))})
    code, _, err = run(capsys, "allocate", "--tree", str(big), "--schedule", '{"alpha": 2}', "--strict")
    assert code == 2
    assert "martingale_residual" in err
    code, _, _ = run(capsys, "allocate", "--tree", str(big), "--schedule", '{"alpha": 2}')
    assert code == 0


def test_allocate_csv_from_later_time(capsys, coin_file):
    code, out, _ = run(capsys, "allocate", "--tree", coin_file, "--t", "1", "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:6] == ["time", "node", "H", "V", "X", "M"]
    assert [r[0] for r in rows[1:]] == ["1", "1"]


def test_schedule_file(capsys, coin_file, tmp_path):
    sched = tmp_path / "s.json"
    sched.write_text(json.dumps({"alpha": [[1.0, 2.0], [2.0, 2.0]]}))
    code, out, _ = run(capsys, "allocate", "--tree", coin_file, "--schedule", str(sched))
    assert code == 0
    assert len(json.loads(out)["agents"]) == 2


def test_convolve(capsys):
    code, out, _ = run(capsys, "convolve", "--utilities", '[{"kind": "exp", "alpha": 2}, {"kind": "exp", "alpha": 2}]', "--grid", "0,1")
    table = json.loads(out)["table"]
    assert table[0]["value"] == 0.0
    assert table[1]["value"] == pytest.approx(0.632120558829, abs=1e-12)
    assert table[1]["x0"] == 0.5


def test_sweeps(capsys, coin_file):
    code, out, _ = run(capsys, "sweep-n", "--tree", coin_file, "--grid", "1,2,4", "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["n_or_m", "premium", "reference", "expansion_term", "residual"]
    assert len(rows) == 4
    code, out, _ = run(capsys, "sweep-m", "--grid", "1,12")
    data = json.loads(out)
    assert data["rows"][1]["premium"] - 0.5 < 0.1 * (data["rows"][0]["premium"] - 0.5)


def test_oracle_check(capsys):
    code, out, _ = run(capsys, "oracle-check", "--seed", "3", "--step", "2e-3")
    assert code == 0
    assert json.loads(out)["pass"] is True


def test_output_is_reproducible(capsys, coin_file, tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"o{k}.json"
        assert main(["oracle-check", "--seed", "7", "--step", "2e-3", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    again = json.loads(outs[0])
    assert json.loads(json.dumps(again)) == again


def test_console_script(coin_file):
    exe = shutil.which("divprem")
    cmd = [exe] if exe else [sys.executable, "-m", "divprem.cli"]
    done = subprocess.run([*cmd, "premium", "--tree", coin_file], capture_output=True, text=True, check=True)
    assert json.loads(done.stdout)["premium"] == 0.620114506958
